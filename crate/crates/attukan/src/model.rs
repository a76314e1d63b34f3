//! The segmentation network: a five-level U-shaped encoder-decoder whose
//! three outer stages are convolution blocks and whose two inner stages are
//! tokenized KAN blocks, with attention gates on every skip connection.
//!
//! Level l feature X^l is the stage output before pooling, so X^1 sits at
//! full resolution and the bottleneck X^5 at one sixteenth (four halvings).
//! Each KAN stage lifts channels with a 3x3 conv + batch norm + ReLU before
//! its resolution-preserving tokenized block; decoder stages mirror the
//! encoder with bilinear upsampling ahead of the block. The head is a
//! pointwise convolution to one channel under a sigmoid.

use crate::attention;
use crate::error::{Error, Result};
use crate::kan::{self, TokenBlockCfg, TokenLayerKind};
use crate::optim::ParamStore;
use crate::spline::SplineSpec;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Channel width per level, strictly increasing.
    pub channels: [usize; 5],
    pub input_channels: usize,
    pub use_attention_gates: bool,
    /// Token-layer flavor of the two inner stages: learnable-activation KAN
    /// layers or the plain linear baseline.
    pub bottleneck: TokenLayerKind,
    pub spline: SplineSpec,
    pub kan_layers: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: [8, 16, 32, 64, 128],
            input_channels: 1,
            use_attention_gates: true,
            bottleneck: TokenLayerKind::Kan,
            spline: SplineSpec::default(),
            kan_layers: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::invalid("input_channels must be positive"));
        }
        for w in self.channels.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid(format!(
                    "channel widths must be strictly increasing, got {:?}",
                    self.channels
                )));
            }
        }
        if self.channels[0] == 0 {
            return Err(Error::invalid("channel widths must be positive"));
        }
        if self.kan_layers == 0 {
            return Err(Error::invalid("token blocks need at least one layer"));
        }
        self.spline.validate()
    }

    fn token_cfg(&self, dim: usize) -> TokenBlockCfg {
        TokenBlockCfg {
            dim,
            n_layers: self.kan_layers,
            spline: self.spline,
            kind: self.bottleneck,
        }
    }
}

pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

/// Probability map plus the per-level stage features X^1..X^5.
pub struct NetOutputs {
    pub prob: Var,
    pub features: [Var; 5],
}

fn register_conv_block(
    store: &mut ParamStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let bound = 1.0 / ((c_in * 9) as f64).sqrt();
    store.insert(
        &format!("{prefix}.conv.w"),
        Tensor::uniform(&[c_out, c_in, 3, 3], bound, rng),
    )?;
    store.insert(&format!("{prefix}.conv.b"), Tensor::zeros(&[c_out]))?;
    kan::register_bn(store, &format!("{prefix}.bn"), c_out)?;
    Ok(())
}

fn conv_block_forward(
    tape: &mut GradTape,
    store: &mut ParamStore,
    prefix: &str,
    x: Var,
    training: bool,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.conv.w"))?;
    let b = tape.param(store, &format!("{prefix}.conv.b"))?;
    let y = tape.conv2d(x, w, Some(b), 1, 1)?;
    let y = kan::bn_forward(tape, store, &format!("{prefix}.bn"), y, training)?;
    Ok(tape.relu(y))
}

impl Model {
    /// Deterministic construction from the config seed. Attention-gate
    /// parameters draw from their own stream so toggling them changes
    /// nothing else.
    pub fn build(config: &ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.channels;
        let cin = config.input_channels;

        register_conv_block(&mut store, "enc1", cin, c[0], &mut rng)?;
        register_conv_block(&mut store, "enc2", c[0], c[1], &mut rng)?;
        register_conv_block(&mut store, "enc3", c[1], c[2], &mut rng)?;
        register_conv_block(&mut store, "enc4.embed", c[2], c[3], &mut rng)?;
        kan::register_token_block(&mut store, "enc4.block", &config.token_cfg(c[3]), &mut rng)?;
        register_conv_block(&mut store, "enc5.embed", c[3], c[4], &mut rng)?;
        kan::register_token_block(&mut store, "enc5.block", &config.token_cfg(c[4]), &mut rng)?;

        register_conv_block(&mut store, "dec4.embed", c[3] + c[4], c[3], &mut rng)?;
        kan::register_token_block(&mut store, "dec4.block", &config.token_cfg(c[3]), &mut rng)?;
        register_conv_block(&mut store, "dec3", c[2] + c[3], c[2], &mut rng)?;
        register_conv_block(&mut store, "dec2", c[1] + c[2], c[1], &mut rng)?;
        register_conv_block(&mut store, "dec1", c[0] + c[1], c[0], &mut rng)?;

        if config.use_attention_gates {
            let mut gate_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
            attention::register_attention_gate(&mut store, "att4", c[3], c[4], &mut gate_rng)?;
            attention::register_attention_gate(&mut store, "att3", c[2], c[3], &mut gate_rng)?;
            attention::register_attention_gate(&mut store, "att2", c[1], c[2], &mut gate_rng)?;
            attention::register_attention_gate(&mut store, "att1", c[0], c[1], &mut gate_rng)?;
        }

        let bound = 1.0 / (c[0] as f64).sqrt();
        store.insert("head.w", Tensor::uniform(&[1, c[0]], bound, &mut rng))?;
        store.insert("head.b", Tensor::zeros(&[1]))?;

        Ok(Model {
            config: *config,
            store,
        })
    }

    pub fn forward(
        &mut self,
        tape: &mut GradTape,
        images: &Tensor,
        training: bool,
    ) -> Result<NetOutputs> {
        let config = self.config;
        forward_pass(&config, tape, &mut self.store, images, training)
    }

    /// Forward with an external store holding this model's parameters; used
    /// where the store must be mutated independently (gradient checking).
    pub fn forward_with_store(
        &self,
        tape: &mut GradTape,
        store: &mut ParamStore,
        images: &Tensor,
        training: bool,
    ) -> Result<NetOutputs> {
        forward_pass(&self.config, tape, store, images, training)
    }

    /// Total learnable parameter elements.
    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }
}

/// One decoder step: gate the skip (or pass it through), upsample the
/// coarser decoder feature, concatenate, and hand the pair to the stage.
fn fuse(
    tape: &mut GradTape,
    store: &mut ParamStore,
    config: &ModelConfig,
    gate_prefix: &str,
    skip: Var,
    below: Var,
) -> Result<Var> {
    let skip = if config.use_attention_gates {
        attention::attention_gate_forward(tape, store, gate_prefix, skip, below)?.gated
    } else {
        skip
    };
    let up = tape.bilinear_up2x(below)?;
    tape.concat_channels(skip, up)
}

fn forward_pass(
    config: &ModelConfig,
    tape: &mut GradTape,
    store: &mut ParamStore,
    images: &Tensor,
    training: bool,
) -> Result<NetOutputs> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != config.input_channels {
        return Err(Error::shape(format!(
            "forward expects [B,{},H,W], got {:?}",
            config.input_channels, shape
        )));
    }
    let (h, w) = (shape[2], shape[3]);
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::shape(format!(
            "input {}x{} is not divisible by 16",
            h, w
        )));
    }

    let x0 = tape.constant(images.clone());

    let e1 = conv_block_forward(tape, store, "enc1", x0, training)?;
    let p1 = tape.max_pool2x2(e1)?;
    let e2 = conv_block_forward(tape, store, "enc2", p1, training)?;
    let p2 = tape.max_pool2x2(e2)?;
    let e3 = conv_block_forward(tape, store, "enc3", p2, training)?;
    let p3 = tape.max_pool2x2(e3)?;

    let e4_in = conv_block_forward(tape, store, "enc4.embed", p3, training)?;
    let cfg4 = config.token_cfg(config.channels[3]);
    let e4 = kan::token_block_forward(tape, store, "enc4.block", &cfg4, e4_in, training)?;
    let p4 = tape.max_pool2x2(e4)?;

    let e5_in = conv_block_forward(tape, store, "enc5.embed", p4, training)?;
    let cfg5 = config.token_cfg(config.channels[4]);
    let e5 = kan::token_block_forward(tape, store, "enc5.block", &cfg5, e5_in, training)?;

    let cat4 = fuse(tape, store, config, "att4", e4, e5)?;
    let d4_in = conv_block_forward(tape, store, "dec4.embed", cat4, training)?;
    let d4 = kan::token_block_forward(tape, store, "dec4.block", &cfg4, d4_in, training)?;

    let cat3 = fuse(tape, store, config, "att3", e3, d4)?;
    let d3 = conv_block_forward(tape, store, "dec3", cat3, training)?;

    let cat2 = fuse(tape, store, config, "att2", e2, d3)?;
    let d2 = conv_block_forward(tape, store, "dec2", cat2, training)?;

    let cat1 = fuse(tape, store, config, "att1", e1, d2)?;
    let d1 = conv_block_forward(tape, store, "dec1", cat1, training)?;

    let head_w = tape.param(store, "head.w")?;
    let head_b = tape.param(store, "head.b")?;
    let logits = tape.conv1x1(d1, head_w, Some(head_b))?;
    let prob = tape.sigmoid(logits);

    Ok(NetOutputs {
        prob,
        features: [e1, e2, e3, e4, e5],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> ModelConfig {
        ModelConfig {
            channels: [2, 4, 8, 16, 32],
            seed,
            ..ModelConfig::default()
        }
    }

    fn unit_images(b: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::uniform(&[b, 1, hw, hw], 1.0, &mut rng);
        t.data_mut().iter_mut().for_each(|v| *v = (*v + 1.0) / 2.0);
        t
    }

    #[test]
    fn build_is_deterministic() {
        let a = Model::build(&small_config(7)).unwrap();
        let b = Model::build(&small_config(7)).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for (name, entry) in a.store.iter() {
            assert_eq!(entry.value, b.store.entry(name).unwrap().value, "{name}");
        }
        let c = Model::build(&small_config(8)).unwrap();
        let differs = a
            .store
            .iter()
            .any(|(name, e)| &e.value != &c.store.entry(name).unwrap().value);
        assert!(differs);
    }

    #[test]
    fn gate_toggle_changes_exactly_the_gate_parameters() {
        let with = Model::build(&small_config(3)).unwrap();
        let without = Model::build(&ModelConfig {
            use_attention_gates: false,
            ..small_config(3)
        })
        .unwrap();
        let with_names: Vec<_> = with.store.names().collect();
        let without_names: Vec<_> = without.store.names().collect();
        let extra: Vec<_> = with_names
            .iter()
            .filter(|n| !without_names.contains(n))
            .collect();
        assert!(!extra.is_empty());
        assert!(extra.iter().all(|n| n.starts_with("att")));
        let missing: Vec<_> = without_names
            .iter()
            .filter(|n| !with_names.contains(n))
            .collect();
        assert!(missing.is_empty());
        // Shared parameters are identical: the gate stream is separate.
        for name in without_names {
            assert_eq!(
                without.store.entry(name).unwrap().value,
                with.store.entry(name).unwrap().value,
                "{name}"
            );
        }
        assert!(with.parameter_count() > without.parameter_count());
    }

    #[test]
    fn parameter_count_matches_shape_arithmetic() {
        let cfg = ModelConfig::default();
        let model = Model::build(&cfg).unwrap();
        let c = cfg.channels;
        let basis = cfg.spline.basis_len();
        let conv_block = |cin: usize, cout: usize| 9 * cin * cout + cout + 2 * cout;
        let token_block = |d: usize| {
            let per_layer = d * d * basis + 2 * d * d  // kan coeff + both weights
                + 9 * d + d                            // dwconv
                + 2 * d; // bn affine
            2 * d * d + 3 * per_layer + 2 * d
        };
        let gate = |cx: usize, cg: usize| {
            let cint = (cx / 2).max(1);
            cint * cx + cint * cg + cint + cint + 1
        };
        let want = conv_block(1, c[0])
            + conv_block(c[0], c[1])
            + conv_block(c[1], c[2])
            + conv_block(c[2], c[3])
            + token_block(c[3])
            + conv_block(c[3], c[4])
            + token_block(c[4])
            + conv_block(c[3] + c[4], c[3])
            + token_block(c[3])
            + conv_block(c[2] + c[3], c[2])
            + conv_block(c[1] + c[2], c[1])
            + conv_block(c[0] + c[1], c[0])
            + gate(c[3], c[4])
            + gate(c[2], c[3])
            + gate(c[1], c[2])
            + gate(c[0], c[1])
            + c[0]
            + 1;
        assert_eq!(model.parameter_count(), want);
    }

    #[test]
    fn forward_shapes_and_probability_range() {
        let mut model = Model::build(&small_config(1)).unwrap();
        let images = unit_images(1, 64, 5);
        let mut tape = GradTape::new();
        let out = model.forward(&mut tape, &images, false).unwrap();
        let prob = tape.value(out.prob);
        assert_eq!(prob.shape(), &[1, 1, 64, 64]);
        assert!(prob.data().iter().all(|p| *p > 0.0 && *p < 1.0));
        // Stage features: X^1 at full resolution down to X^5 at 1/16.
        let sizes = [64usize, 32, 16, 8, 4];
        for (f, s) in out.features.iter().zip(sizes) {
            let sh = tape.value(*f).shape();
            assert_eq!(&sh[2..], &[s, s]);
        }
    }

    #[test]
    fn eval_forward_is_pure_and_batch_consistent() {
        let mut model = Model::build(&small_config(2)).unwrap();
        let one = unit_images(1, 32, 9);
        let mut two = Tensor::zeros(&[2, 1, 32, 32]);
        two.data_mut()[..32 * 32].copy_from_slice(one.data());
        two.data_mut()[32 * 32..].copy_from_slice(one.data());

        let mut t1 = GradTape::new();
        let o1 = model.forward(&mut t1, &two, false).unwrap();
        let p1 = t1.value(o1.prob).clone();
        // Identical rows for identical images.
        assert_eq!(&p1.data()[..32 * 32], &p1.data()[32 * 32..]);

        // Bitwise repeatability in eval mode.
        let mut t2 = GradTape::new();
        let o2 = model.forward(&mut t2, &two, false).unwrap();
        assert_eq!(&p1, t2.value(o2.prob));
    }

    #[test]
    fn invalid_configs_and_shapes_are_rejected() {
        let bad = ModelConfig {
            channels: [8, 8, 32, 64, 128],
            ..ModelConfig::default()
        };
        assert!(Model::build(&bad).is_err());

        let mut model = Model::build(&small_config(0)).unwrap();
        let mut tape = GradTape::new();
        let images = unit_images(1, 24, 3);
        assert!(model.forward(&mut tape, &images, false).is_err());
    }

    #[test]
    fn mlp_variant_swaps_token_layers() {
        let kan_model = Model::build(&small_config(4)).unwrap();
        let mlp_model = Model::build(&ModelConfig {
            bottleneck: TokenLayerKind::Mlp,
            ..small_config(4)
        })
        .unwrap();
        assert!(kan_model.store.contains("enc4.block.layer0.kan.coeff"));
        assert!(!kan_model.store.contains("enc4.block.layer0.lin.w"));
        assert!(mlp_model.store.contains("enc4.block.layer0.lin.w"));
        assert!(!mlp_model.store.contains("enc4.block.layer0.kan.coeff"));
    }
}
