use attukan::gradcheck;
use attukan::kan::{self, TokenBlockCfg, TokenLayerKind};
use attukan::optim::ParamStore;
use attukan::spline::SplineSpec;
use attukan::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(0xA11CE);
    let cfg = TokenBlockCfg {
        dim: 2,
        n_layers: 3,
        spline: SplineSpec::default(),
        kind: TokenLayerKind::Kan,
    };
    let mut s = ParamStore::new();
    s.insert("x", Tensor::uniform(&[1, 2, 4, 4], 1.0, &mut r)).unwrap();
    kan::register_token_block(&mut s, "blk", &cfg, &mut r).unwrap();
    let report = gradcheck::finite_diff_check(&mut s, 1e-5, None, 1, move |t, s| {
        let x = t.param(s, "x")?;
        let y = kan::token_block_forward(t, s, "blk", &cfg, x, true)?;
        let shape = t.value(y).shape().to_vec();
        let probe = t.constant(Tensor::uniform(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(36)));
        let prod = t.mul(y, probe)?;
        Ok(t.sum(prod))
    })
    .unwrap();
    let mut rows: Vec<_> = report.per_param.iter().collect();
    rows.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap());
    for (name, err) in rows.iter().take(12) {
        println!("{name:<28} {err:.3e}");
    }
    println!("nondiff: {:?}", report.nondiff_sites);
}
