//! KAN layers and the tokenized KAN block.
//!
//! A KAN layer replaces the usual weight-matrix-plus-fixed-activation with a
//! learnable univariate function on every input-output edge:
//!
//!   phi[p][q](t) = w_base[p][q] * silu(t) + w_spline[p][q] * sum_i c[p][q][i] * B_i(t)
//!
//! and output q sums phi over inputs p. The tokenized block flattens a
//! feature map into per-position tokens, runs a short stack of KAN layers
//! mixed spatially by depth-wise convolutions, and adds the result back to
//! its input under a per-token layer norm.

use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::spline::{basis_window, SplineSpec};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dense forward pass of one KAN layer over the trailing axis of `x`.
/// `x: [..., n_in]`, `coeff: [n_in, n_out, basis]`, weights `[n_in, n_out]`.
pub(crate) fn kan_forward(
    x: &Tensor,
    coeff: &Tensor,
    w_base: &Tensor,
    w_spline: &Tensor,
    spec: &SplineSpec,
) -> Result<Tensor> {
    let n_in = *x.shape().last().unwrap();
    let n_out = coeff.shape()[1];
    let sbasis = spec.basis_len();
    let rows = x.numel() / n_in;
    let xd = x.data();
    let cd = coeff.data();
    let wb = w_base.data();
    let ws = w_spline.data();
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        let orow = &mut out[r * n_out..(r + 1) * n_out];
        for p in 0..n_in {
            let xv = xd[r * n_in + p];
            let win = basis_window(xv, spec);
            let silu = xv * sigmoid(xv);
            let cbase = p * n_out * sbasis;
            let wrow = p * n_out;
            for q in 0..n_out {
                let cs = &cd[cbase + q * sbasis + win.first..];
                let mut spline = 0.0;
                for (j, b) in win.values.iter().enumerate() {
                    spline += cs[j] * b;
                }
                orow[q] += wb[wrow + q] * silu + ws[wrow + q] * spline;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = n_out;
    Tensor::new(shape, out)
}

/// Gradients of a KAN layer with respect to input and all three parameter
/// tensors. The spline branch has zero input-derivative where the forward
/// pass clamped the input to the grid; the silu branch always contributes.
pub(crate) fn kan_backward(
    x: &Tensor,
    coeff: &Tensor,
    w_base: &Tensor,
    w_spline: &Tensor,
    spec: &SplineSpec,
    d_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_in = *x.shape().last().unwrap();
    let n_out = coeff.shape()[1];
    let sbasis = spec.basis_len();
    let rows = x.numel() / n_in;
    let xd = x.data();
    let cd = coeff.data();
    let wb = w_base.data();
    let ws = w_spline.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dc = vec![0.0; cd.len()];
    let mut dwb = vec![0.0; wb.len()];
    let mut dws = vec![0.0; ws.len()];
    for r in 0..rows {
        let drow = &d_out[r * n_out..(r + 1) * n_out];
        for p in 0..n_in {
            let xv = xd[r * n_in + p];
            let win = basis_window(xv, spec);
            let sig = sigmoid(xv);
            let silu = xv * sig;
            let dsilu = sig + xv * sig * (1.0 - sig);
            let cbase = p * n_out * sbasis;
            let wrow = p * n_out;
            let mut dxv = 0.0;
            for q in 0..n_out {
                let g = drow[q];
                if g == 0.0 {
                    continue;
                }
                let coff = cbase + q * sbasis + win.first;
                let mut spline = 0.0;
                let mut dspline_dx = 0.0;
                for j in 0..win.values.len() {
                    let cval = cd[coff + j];
                    spline += cval * win.values[j];
                    dspline_dx += cval * win.derivs[j];
                    dc[coff + j] += ws[wrow + q] * win.values[j] * g;
                }
                dwb[wrow + q] += silu * g;
                dws[wrow + q] += spline * g;
                dxv += (wb[wrow + q] * dsilu + ws[wrow + q] * dspline_dx) * g;
            }
            dx[r * n_in + p] += dxv;
        }
    }
    (dx, dc, dwb, dws)
}

/// Parameters of one KAN layer.
#[derive(Debug, Clone)]
pub struct KanLayerParams {
    pub coeff: Tensor,
    pub w_base: Tensor,
    pub w_spline: Tensor,
}

impl KanLayerParams {
    /// Spline coefficients as small uniform noise, base weights at
    /// 1/sqrt(n_in), spline weights at 1.
    pub fn init(n_in: usize, n_out: usize, spec: &SplineSpec, rng: &mut impl Rng) -> Self {
        KanLayerParams {
            coeff: Tensor::uniform(&[n_in, n_out, spec.basis_len()], 0.1, rng),
            w_base: Tensor::full(&[n_in, n_out], 1.0 / (n_in as f64).sqrt()),
            w_spline: Tensor::full(&[n_in, n_out], 1.0),
        }
    }
}

/// Pure evaluation of one KAN layer on a batch `x: [B, n_in]`.
pub fn kan_layer_forward(x: &Tensor, params: &KanLayerParams, spec: &SplineSpec) -> Result<Tensor> {
    spec.validate()?;
    let n_in = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("kan_layer_forward on 0-d tensor"))?;
    if params.coeff.shape()[0] != n_in {
        return Err(Error::shape(format!(
            "kan_layer_forward: input width {} vs coefficients {:?}",
            n_in,
            params.coeff.shape()
        )));
    }
    kan_forward(x, &params.coeff, &params.w_base, &params.w_spline, spec)
}

/// Tokens of a feature map together with the spatial shape they came from.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub height: usize,
    pub width: usize,
}

/// Project each spatial position of `x: [B,C,H,W]` through `proj: [C,D]`.
pub fn tokenize(x: &Tensor, proj: &Tensor) -> Result<TokenGrid> {
    if x.shape().len() != 4 {
        return Err(Error::shape("tokenize expects [B,C,H,W]"));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let pv = tape.constant(proj.clone());
    let t = tape.tokenize(xv, pv)?;
    Ok(TokenGrid {
        tokens: tape.value(t).clone(),
        height: h,
        width: w,
    })
}

/// Project tokens back to a `[B,C,H,W]` map through `proj_out: [D,C]`.
pub fn detokenize(grid: &TokenGrid, proj_out: &Tensor) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let tv = tape.constant(grid.tokens.clone());
    let pv = tape.constant(proj_out.clone());
    let out = tape.detokenize(tv, pv, grid.height, grid.width)?;
    Ok(tape.value(out).clone())
}

/// Plain affine/ReLU stack: the baseline the KAN layers are compared against.
/// Layers apply as W0 -> relu -> W1 -> relu -> ... -> W_last (no trailing
/// activation).
pub fn mlp_block(x: &Tensor, weights: &[(Tensor, Tensor)]) -> Result<Tensor> {
    if weights.is_empty() {
        return Err(Error::invalid("mlp_block needs at least one layer"));
    }
    let mut tape = GradTape::new();
    let mut cur = tape.constant(x.clone());
    for (i, (w, b)) in weights.iter().enumerate() {
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        cur = tape.matmul(cur, wv)?;
        cur = tape.add_bias_row(cur, bv)?;
        if i + 1 < weights.len() {
            cur = tape.relu(cur);
        }
    }
    Ok(tape.value(cur).clone())
}

/// Which per-token transform the block's layer slots use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TokenLayerKind {
    Kan,
    Mlp,
}

/// Shape of a tokenized block at one stage: embedding dimension equals the
/// stage channel count so the residual add type-checks.
#[derive(Debug, Clone, Copy)]
pub struct TokenBlockCfg {
    pub dim: usize,
    pub n_layers: usize,
    pub spline: SplineSpec,
    pub kind: TokenLayerKind,
}

/// Batch-norm parameter/buffer registration shared by conv and token blocks.
pub(crate) fn register_bn(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0))?;
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
    store.insert_buffer(&format!("{prefix}.running_mean"), Tensor::zeros(&[channels]))?;
    store.insert_buffer(&format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0))?;
    Ok(())
}

/// Batch norm on the tape; training mode folds fresh batch statistics into
/// the running buffers with momentum 0.1.
pub(crate) fn bn_forward(
    tape: &mut GradTape,
    store: &mut ParamStore,
    prefix: &str,
    x: Var,
    training: bool,
) -> Result<Var> {
    const MOMENTUM: f64 = 0.1;
    let gamma = tape.param(store, &format!("{prefix}.gamma"))?;
    let beta = tape.param(store, &format!("{prefix}.beta"))?;
    let rm_name = format!("{prefix}.running_mean");
    let rv_name = format!("{prefix}.running_var");
    if training {
        let (out, mean, var) = tape.batch_norm_train(x, gamma, beta)?;
        let mut rm = store.value(&rm_name)?.clone();
        let mut rv = store.value(&rv_name)?.clone();
        for (r, b) in rm.data_mut().iter_mut().zip(mean.data()) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
        }
        for (r, b) in rv.data_mut().iter_mut().zip(var.data()) {
            *r = (1.0 - MOMENTUM) * *r + MOMENTUM * b;
        }
        store.set_value(&rm_name, rm)?;
        store.set_value(&rv_name, rv)?;
        Ok(out)
    } else {
        let rm = store.value(&rm_name)?.clone();
        let rv = store.value(&rv_name)?.clone();
        tape.batch_norm_eval(x, gamma, beta, &rm, &rv)
    }
}

/// Register all parameters of one tokenized block under `prefix`.
pub fn register_token_block(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TokenBlockCfg,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = cfg.dim;
    let bound = 1.0 / (d as f64).sqrt();
    store.insert(&format!("{prefix}.proj_in"), Tensor::uniform(&[d, d], bound, rng))?;
    store.insert(&format!("{prefix}.proj_out"), Tensor::uniform(&[d, d], bound, rng))?;
    for l in 0..cfg.n_layers {
        match cfg.kind {
            TokenLayerKind::Kan => {
                let p = KanLayerParams::init(d, d, &cfg.spline, rng);
                store.insert(&format!("{prefix}.layer{l}.kan.coeff"), p.coeff)?;
                store.insert(&format!("{prefix}.layer{l}.kan.w_base"), p.w_base)?;
                store.insert(&format!("{prefix}.layer{l}.kan.w_spline"), p.w_spline)?;
            }
            TokenLayerKind::Mlp => {
                store.insert(
                    &format!("{prefix}.layer{l}.lin.w"),
                    Tensor::uniform(&[d, d], bound, rng),
                )?;
                store.insert(&format!("{prefix}.layer{l}.lin.b"), Tensor::zeros(&[d]))?;
            }
        }
        // No depth-wise bias: the batch norm that follows would absorb it.
        store.insert(
            &format!("{prefix}.layer{l}.dwconv.w"),
            Tensor::uniform(&[d, 3, 3], 1.0 / 3.0, rng),
        )?;
        register_bn(store, &format!("{prefix}.layer{l}.bn"), d)?;
    }
    store.insert(&format!("{prefix}.ln.gamma"), Tensor::full(&[d], 1.0))?;
    store.insert(&format!("{prefix}.ln.beta"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Resolution-preserving tokenized block: tokenize, run the layer stack with
/// depth-wise spatial mixing, detokenize, add the input back, layer-norm
/// each token over channels.
pub fn token_block_forward(
    tape: &mut GradTape,
    store: &mut ParamStore,
    prefix: &str,
    cfg: &TokenBlockCfg,
    x: Var,
    training: bool,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.dim {
        return Err(Error::shape(format!(
            "token block {prefix}: input {:?} does not match dim {}",
            shape, cfg.dim
        )));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let d = cfg.dim;

    let proj_in = tape.param(store, &format!("{prefix}.proj_in"))?;
    let mut tokens = tape.tokenize(x, proj_in)?;
    for l in 0..cfg.n_layers {
        tokens = match cfg.kind {
            TokenLayerKind::Kan => {
                let coeff = tape.param(store, &format!("{prefix}.layer{l}.kan.coeff"))?;
                let wb = tape.param(store, &format!("{prefix}.layer{l}.kan.w_base"))?;
                let ws = tape.param(store, &format!("{prefix}.layer{l}.kan.w_spline"))?;
                tape.kan_layer(tokens, coeff, wb, ws, &cfg.spline)?
            }
            TokenLayerKind::Mlp => {
                let wv = tape.param(store, &format!("{prefix}.layer{l}.lin.w"))?;
                let bv = tape.param(store, &format!("{prefix}.layer{l}.lin.b"))?;
                let flat = tape.reshape(tokens, vec![b * h * w, d])?;
                let y = tape.matmul(flat, wv)?;
                let y = tape.add_bias_row(y, bv)?;
                tape.reshape(y, vec![b, h * w, d])?
            }
        };
        let map = tape.tok_to_map(tokens, h, w)?;
        let kw = tape.param(store, &format!("{prefix}.layer{l}.dwconv.w"))?;
        let map = tape.dwconv3x3(map, kw, None)?;
        let map = bn_forward(tape, store, &format!("{prefix}.layer{l}.bn"), map, training)?;
        let map = tape.relu(map);
        tokens = tape.map_to_tok(map)?;
    }
    let proj_out = tape.param(store, &format!("{prefix}.proj_out"))?;
    let branch = tape.detokenize(tokens, proj_out, h, w)?;
    let sum = tape.add(x, branch)?;
    let ln_g = tape.param(store, &format!("{prefix}.ln.gamma"))?;
    let ln_b = tape.param(store, &format!("{prefix}.ln.beta"))?;
    tape.layer_norm_channels(sum, ln_g, ln_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn base_branch_alone_is_silu() {
        // w_spline = 0 and w_base an identity pattern: output q equals
        // silu(x_q) coordinate by coordinate.
        let spec = SplineSpec::default();
        let n = 3;
        let mut wb = Tensor::zeros(&[n, n]);
        for p in 0..n {
            wb.data_mut()[p * n + p] = 1.0;
        }
        let params = KanLayerParams {
            coeff: Tensor::uniform(&[n, n, spec.basis_len()], 0.5, &mut rng(0)),
            w_base: wb,
            w_spline: Tensor::zeros(&[n, n]),
        };
        let x = Tensor::new(vec![2, 3], vec![-1.0, 0.0, 0.5, 1.5, -0.3, 2.0]).unwrap();
        let y = kan_layer_forward(&x, &params, &spec).unwrap();
        for (xi, yi) in x.data().iter().zip(y.data()) {
            let silu = xi / (1.0 + (-xi).exp());
            assert!((yi - silu).abs() < 1e-12, "{yi} vs {silu}");
        }
    }

    #[test]
    fn constant_coefficients_collapse_by_partition_of_unity() {
        // All coefficients equal kappa on an edge: the spline term is exactly
        // w_spline * kappa everywhere in the grid.
        let spec = SplineSpec::default();
        let kappa = 0.37;
        let params = KanLayerParams {
            coeff: Tensor::full(&[1, 1, spec.basis_len()], kappa),
            w_base: Tensor::zeros(&[1, 1]),
            w_spline: Tensor::full(&[1, 1], 2.0),
        };
        for &x in &[-1.9, -0.2, 0.0, 1.3] {
            let xt = Tensor::new(vec![1, 1], vec![x]).unwrap();
            let y = kan_layer_forward(&xt, &params, &spec).unwrap();
            assert!((y.data()[0] - 2.0 * kappa).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_scalar_loop_reference() {
        // Independent per-edge evaluation with explicit loops and the full
        // basis vector.
        let spec = SplineSpec::default();
        let (b, n_in, n_out) = (2, 3, 2);
        let mut r = rng(7);
        let params = KanLayerParams {
            coeff: Tensor::uniform(&[n_in, n_out, spec.basis_len()], 0.4, &mut r),
            w_base: Tensor::uniform(&[n_in, n_out], 0.8, &mut r),
            w_spline: Tensor::uniform(&[n_in, n_out], 0.8, &mut r),
        };
        let x = Tensor::uniform(&[b, n_in], 1.8, &mut r);
        let y = kan_layer_forward(&x, &params, &spec).unwrap();

        let sb = spec.basis_len();
        for bi in 0..b {
            for q in 0..n_out {
                let mut want = 0.0;
                for p in 0..n_in {
                    let xv = x.data()[bi * n_in + p];
                    let basis = crate::spline::bspline_basis(xv, &spec).unwrap();
                    let mut spline = 0.0;
                    for i in 0..sb {
                        spline += params.coeff.data()[(p * n_out + q) * sb + i] * basis[i];
                    }
                    let silu = xv / (1.0 + (-xv).exp());
                    want += params.w_base.data()[p * n_out + q] * silu
                        + params.w_spline.data()[p * n_out + q] * spline;
                }
                let got = y.data()[bi * n_out + q];
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn spline_term_is_linear_in_coefficients() {
        let spec = SplineSpec::default();
        let mut r = rng(3);
        let base = KanLayerParams::init(2, 2, &spec, &mut r);
        let x = Tensor::uniform(&[4, 2], 1.5, &mut r);
        let zeroed = KanLayerParams {
            coeff: Tensor::zeros(&[2, 2, spec.basis_len()]),
            ..base.clone()
        };
        let doubled = KanLayerParams {
            coeff: Tensor::new(
                base.coeff.shape().to_vec(),
                base.coeff.data().iter().map(|c| 2.0 * c).collect(),
            )
            .unwrap(),
            ..base.clone()
        };
        let y0 = kan_layer_forward(&x, &zeroed, &spec).unwrap();
        let y1 = kan_layer_forward(&x, &base, &spec).unwrap();
        let y2 = kan_layer_forward(&x, &doubled, &spec).unwrap();
        for i in 0..y0.numel() {
            let single = y1.data()[i] - y0.data()[i];
            let double = y2.data()[i] - y0.data()[i];
            assert!((double - 2.0 * single).abs() < 1e-10);
        }
    }

    #[test]
    fn tokenize_identity_round_trip() {
        let mut r = rng(11);
        let x = Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut r);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let grid = tokenize(&x, &eye).unwrap();
        let back = detokenize(&grid, &eye).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn tokenize_matches_hand_reshape_matmul() {
        let mut r = rng(13);
        let (b, c, h, w, d) = (1, 2, 2, 2, 3);
        let x = Tensor::uniform(&[b, c, h, w], 1.0, &mut r);
        let proj = Tensor::uniform(&[c, d], 1.0, &mut r);
        let grid = tokenize(&x, &proj).unwrap();
        assert_eq!(grid.tokens.shape(), &[b, h * w, d]);
        for s in 0..h * w {
            for di in 0..d {
                let mut want = 0.0;
                for ci in 0..c {
                    want += x.data()[ci * h * w + s] * proj.data()[ci * d + di];
                }
                let got = grid.tokens.data()[s * d + di];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_input_gives_identical_tokens() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.7);
        let proj = Tensor::uniform(&[2, 2], 1.0, &mut rng(5));
        let grid = tokenize(&x, &proj).unwrap();
        let first = &grid.tokens.data()[..2];
        for s in 0..9 {
            assert_eq!(&grid.tokens.data()[s * 2..s * 2 + 2], first);
        }
    }

    #[test]
    fn tokenize_rejects_projection_mismatch() {
        let x = Tensor::zeros(&[1, 2, 2, 2]);
        let proj = Tensor::zeros(&[3, 4]);
        assert!(tokenize(&x, &proj).is_err());
    }

    #[test]
    fn mlp_identity_layer_and_relu() {
        let mut eye = Tensor::zeros(&[2, 2]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        let x = Tensor::new(vec![1, 2], vec![0.25, -0.75]).unwrap();
        let y = mlp_block(&x, &[(eye.clone(), Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(y, x);

        // Two identity layers sandwich a ReLU: negatives are cut.
        let y2 = mlp_block(
            &x,
            &[
                (eye.clone(), Tensor::zeros(&[2])),
                (eye, Tensor::zeros(&[2])),
            ],
        )
        .unwrap();
        assert_eq!(y2.data(), &[0.25, 0.0]);
    }

    #[test]
    fn mlp_two_layers_match_matrix_arithmetic() {
        let mut r = rng(17);
        let w0 = Tensor::uniform(&[3, 4], 1.0, &mut r);
        let b0 = Tensor::uniform(&[4], 1.0, &mut r);
        let w1 = Tensor::uniform(&[4, 2], 1.0, &mut r);
        let b1 = Tensor::uniform(&[2], 1.0, &mut r);
        let x = Tensor::uniform(&[2, 3], 1.0, &mut r);
        let y = mlp_block(&x, &[(w0.clone(), b0.clone()), (w1.clone(), b1.clone())]).unwrap();
        for bi in 0..2 {
            let mut hidden = vec![0.0; 4];
            for j in 0..4 {
                let mut acc = b0.data()[j];
                for i in 0..3 {
                    acc += x.data()[bi * 3 + i] * w0.data()[i * 4 + j];
                }
                hidden[j] = acc.max(0.0);
            }
            for q in 0..2 {
                let mut acc = b1.data()[q];
                for j in 0..4 {
                    acc += hidden[j] * w1.data()[j * 2 + q];
                }
                assert!((y.data()[bi * 2 + q] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn token_block_zero_branch_reduces_to_layer_norm() {
        let cfg = TokenBlockCfg {
            dim: 3,
            n_layers: 3,
            spline: SplineSpec::default(),
            kind: TokenLayerKind::Kan,
        };
        let mut store = ParamStore::new();
        register_token_block(&mut store, "blk", &cfg, &mut rng(2)).unwrap();
        // Zeroing the output projection kills the whole branch.
        store
            .set_value("blk.proj_out", Tensor::zeros(&[3, 3]))
            .unwrap();

        let x = Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut rng(4));
        let mut tape = GradTape::new();
        let xv = tape.constant(x.clone());
        let y = token_block_forward(&mut tape, &mut store, "blk", &cfg, xv, false).unwrap();

        let mut ref_tape = GradTape::new();
        let xr = ref_tape.constant(x);
        let g = ref_tape.constant(store.value("blk.ln.gamma").unwrap().clone());
        let b = ref_tape.constant(store.value("blk.ln.beta").unwrap().clone());
        let want = ref_tape.layer_norm_channels(xr, g, b).unwrap();
        assert!(tape.value(y).max_abs_diff(ref_tape.value(want)) < 1e-12);
    }

    #[test]
    fn token_block_preserves_shape() {
        for hw in [4usize, 8] {
            let cfg = TokenBlockCfg {
                dim: 2,
                n_layers: 3,
                spline: SplineSpec::default(),
                kind: TokenLayerKind::Kan,
            };
            let mut store = ParamStore::new();
            register_token_block(&mut store, "blk", &cfg, &mut rng(9)).unwrap();
            let x = Tensor::uniform(&[1, 2, hw, hw], 1.0, &mut rng(10));
            let mut tape = GradTape::new();
            let xv = tape.constant(x);
            let y = token_block_forward(&mut tape, &mut store, "blk", &cfg, xv, true).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, 2, hw, hw]);
        }
    }
}
