//! Bottleneck adapters with a semantic-gated fusion unit, one per
//! (encoder block, sublayer) pair.

use rand::Rng;

use crate::autograd::Var;
use crate::config::AdapterVariant;
use crate::error::{Error, Result};
use crate::foundation::{BlockAdapters, Stage};
use crate::nn;
use crate::params::{uniform_init, Binding, Owner, ParameterRegistry};
use crate::tensor::Tensor;

pub const MADAPTER: &str = "madapter";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterDims {
    /// Encoder block width `c`.
    pub width: usize,
    /// Bottleneck width `m`.
    pub bottleneck: usize,
    /// Channels of `f_sem` before alignment.
    pub sem_dim: usize,
    pub blocks: usize,
    pub variant: AdapterVariant,
    /// One adapter pair reused by every block.
    pub shared: bool,
}

impl AdapterDims {
    fn uses_block(&self) -> bool {
        matches!(
            self.variant,
            AdapterVariant::Full | AdapterVariant::NoFusion | AdapterVariant::PlainBlock
        )
    }

    fn uses_semantic(&self) -> bool {
        matches!(
            self.variant,
            AdapterVariant::Full | AdapterVariant::NoFusion | AdapterVariant::PlainSemantic
        )
    }

    /// Registry prefix of the adapter at `(block, stage)`.
    pub fn prefix(&self, block: usize, stage: Stage) -> String {
        if self.shared {
            format!("{MADAPTER}.shared.{}", stage.name())
        } else {
            format!("{MADAPTER}.block{block}.{}", stage.name())
        }
    }

    /// Closed-form size of one adapter: `c*m` per down-projection, `9*m*m`
    /// for the fusion conv, `m*c` up, plus biases.
    pub fn params_per_adapter(&self) -> usize {
        let (c, m) = (self.width, self.bottleneck);
        let mut n = m * c + c;
        if self.uses_block() {
            n += c * m + m;
        }
        if self.uses_semantic() {
            n += c * m + m;
        }
        if self.variant == AdapterVariant::Full {
            n += 9 * m * m + m;
        }
        n
    }
}

pub fn register(reg: &mut ParameterRegistry, rng: &mut impl Rng, d: AdapterDims) -> Result<()> {
    if d.variant == AdapterVariant::None {
        return Ok(());
    }
    let o = Owner::MAdapter;
    let (c, m) = (d.width, d.bottleneck);
    if d.uses_semantic() {
        nn::register_conv(reg, rng, o, &format!("{MADAPTER}.sem_align"), d.sem_dim, c, 1)?;
    }
    let blocks = if d.shared { 1 } else { d.blocks };
    for block in 0..blocks {
        for stage in [Stage::Attention, Stage::Mlp] {
            let p = d.prefix(block, stage);
            if d.uses_block() {
                nn::register_linear(reg, rng, o, &format!("{p}.down"), c, m)?;
            }
            if d.uses_semantic() {
                nn::register_linear(reg, rng, o, &format!("{p}.down_sem"), c, m)?;
            }
            if d.variant == AdapterVariant::Full {
                nn::register_conv(reg, rng, o, &format!("{p}.fusion"), m, m, 3)?;
            }
            reg.register(format!("{p}.up.weight"), o, Tensor::zeros(&[m, c]))?;
            reg.register(format!("{p}.up.bias"), o, Tensor::zeros(&[c]))?;
        }
    }
    Ok(())
}

/// Re-draw the up-projections, for tests that need a non-trivial adapter.
pub fn randomize_up(reg: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<()> {
    let names: Vec<String> = reg
        .entries()
        .iter()
        .filter(|e| e.name.starts_with(MADAPTER) && e.name.contains(".up."))
        .map(|e| e.name.clone())
        .collect();
    for n in names {
        let shape = reg.tensor(&n)?.shape().to_vec();
        reg.set(&n, uniform_init(rng, &shape, shape[0]))?;
    }
    Ok(())
}

/// `phi(x W_down) W_up`.
pub fn adapter_plain(b: &Binding, x: Var, prefix: &str) -> Result<Var> {
    let g = b.graph();
    let w = g.shape(b.param(&format!("{prefix}.down.weight"))?)[0];
    let xs = g.shape(x);
    if xs.last() != Some(&w) {
        return Err(Error::shape(format!("adapter expects width {w}, got {xs:?}")));
    }
    let h = g.relu(nn::linear(b, x, &format!("{prefix}.down"))?);
    nn::linear(b, h, &format!("{prefix}.up"))
}

/// `Conv3(x_low + x_low * sigmoid(sem_low))` on the square token grid.
pub fn fusion_unit(b: &Binding, x_low: Var, sem_low: Var, prefix: &str) -> Result<Var> {
    let g = b.graph();
    let (xs, ss) = (g.shape(x_low), g.shape(sem_low));
    if xs != ss || xs.len() != 3 {
        return Err(Error::shape(format!("fusion streams differ: {xs:?} vs {ss:?}")));
    }
    let side = (xs[1] as f64).sqrt().round() as usize;
    if side * side != xs[1] {
        return Err(Error::shape(format!("{} tokens do not form a square grid", xs[1])));
    }
    let gate = g.sigmoid(sem_low);
    let gated = g.mul(x_low, gate)?;
    let h = g.add(x_low, gated)?;
    let h = nn::from_tokens(g, h, side, side)?;
    let h = nn::conv(b, h, prefix, 1, 1)?;
    nn::to_tokens(g, h)
}

/// Resample `f_sem: [B, c_sem, h, w]` to the `grid x grid` token layout and
/// project it to the encoder width: `[B, grid*grid, c]`.
pub fn align_semantic(b: &Binding, f_sem: Var, grid: usize) -> Result<Var> {
    let g = b.graph();
    let x = g.resize_bilinear(f_sem, grid, grid)?;
    let x = nn::conv(b, x, &format!("{MADAPTER}.sem_align"), 1, 0)?;
    nn::to_tokens(g, x)
}

/// Delta for one adapter given block tokens `x` and aligned semantic tokens.
pub fn madapter_forward(
    b: &Binding,
    variant: AdapterVariant,
    x: Var,
    sem: Option<Var>,
    prefix: &str,
) -> Result<Var> {
    let g = b.graph();
    let need_sem = || sem.ok_or_else(|| Error::invalid("adapter needs the semantic feature"));
    let hidden = match variant {
        AdapterVariant::None => return Err(Error::invalid("no adapter configured")),
        AdapterVariant::PlainBlock => return adapter_plain(b, x, prefix),
        AdapterVariant::PlainSemantic => {
            let s = need_sem()?;
            g.relu(nn::linear(b, s, &format!("{prefix}.down_sem"))?)
        }
        AdapterVariant::NoFusion | AdapterVariant::Full => {
            let s = need_sem()?;
            let (xs, ss) = (g.shape(x), g.shape(s));
            if xs != ss {
                return Err(Error::shape(format!(
                    "semantic tokens {ss:?} do not align with block tokens {xs:?}"
                )));
            }
            let x_low = nn::linear(b, x, &format!("{prefix}.down"))?;
            let s_low = nn::linear(b, s, &format!("{prefix}.down_sem"))?;
            let fused = if variant == AdapterVariant::Full {
                fusion_unit(b, x_low, s_low, &format!("{prefix}.fusion"))?
            } else {
                g.add(x_low, s_low)?
            };
            g.relu(fused)
        }
    };
    nn::linear(b, hidden, &format!("{prefix}.up"))
}

/// The adapters of one forward pass, with the semantic feature already aligned.
pub struct Adapters {
    dims: AdapterDims,
    sem: Option<Var>,
}

impl Adapters {
    pub fn new(b: &Binding, dims: AdapterDims, f_sem: Var, grid: usize) -> Result<Self> {
        let sem = if dims.uses_semantic() {
            Some(align_semantic(b, f_sem, grid)?)
        } else {
            None
        };
        Ok(Self { dims, sem })
    }
}

impl BlockAdapters for Adapters {
    fn blocks(&self) -> usize {
        self.dims.blocks
    }

    fn delta(&self, b: &Binding, block: usize, stage: Stage, x: Var) -> Result<Var> {
        madapter_forward(b, self.dims.variant, x, self.sem, &self.dims.prefix(block, stage))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;
    use crate::autograd::Graph;
    use crate::params::BindMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(variant: AdapterVariant) -> AdapterDims {
        AdapterDims {
            width: 32,
            bottleneck: 8,
            sem_dim: 8,
            blocks: 2,
            variant,
            shared: false,
        }
    }

    fn setup(variant: AdapterVariant, randomize: bool) -> ParameterRegistry {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut reg = ParameterRegistry::new();
        register(&mut reg, &mut rng, dims(variant)).unwrap();
        if randomize {
            randomize_up(&mut reg, &mut rng).unwrap();
        }
        reg
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shapes_and_zero_init() {
        let reg = setup(AdapterVariant::Full, false);
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let ad = Adapters::new(&b, dims(AdapterVariant::Full), g.constant(rand(&[1, 8, 12, 12], 0)), 4).unwrap();
        let x = g.constant(rand(&[1, 16, 32], 1));
        let d = ad.delta(&b, 1, Stage::Mlp, x).unwrap();
        assert_eq!(g.shape(d), vec![1, 16, 32]);
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));

        let p = adapter_plain(&b, x, "madapter.block0.attn").unwrap();
        assert!(g.value(p).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn plain_adapter_width_is_checked() {
        let reg = setup(AdapterVariant::Full, true);
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let x = g.constant(rand(&[1, 16, 31], 1));
        assert!(adapter_plain(&b, x, "madapter.block0.attn").is_err());
    }

    #[test]
    fn relu_kills_negative_signal() {
        let mut reg = setup(AdapterVariant::Full, true);
        let p = "madapter.block0.attn";
        let w = Tensor::from_fn(&[32, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        reg.set(&format!("{p}.down.weight"), w).unwrap();
        reg.set(&format!("{p}.down.bias"), Tensor::zeros(&[8])).unwrap();
        reg.set(&format!("{p}.up.bias"), Tensor::zeros(&[32])).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let x = g.constant(rand(&[1, 16, 32], 2).map(|v| -v.abs()));
        let out = adapter_plain(&b, x, p).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    fn unit_reg() -> ParameterRegistry {
        let mut reg = setup(AdapterVariant::Full, true);
        let mut w = Tensor::zeros(&[8, 8, 3, 3]);
        for o in 0..8 {
            w.data_mut()[((o * 8 + o) * 3 + 1) * 3 + 1] = 1.0;
        }
        reg.set("madapter.block0.attn.fusion.weight", w).unwrap();
        reg.set("madapter.block0.attn.fusion.bias", Tensor::zeros(&[8])).unwrap();
        reg
    }

    #[test]
    fn fusion_gate_limits() {
        // centre-tap identity conv exposes the conv input directly
        let reg = unit_reg();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let x = rand(&[1, 16, 8], 3);
        let p = "madapter.block0.attn.fusion";
        let zero = g.constant(Tensor::zeros(&[1, 16, 8]));
        let out = g.value(fusion_unit(&b, g.constant(x.clone()), zero, p).unwrap());
        assert!(out.max_abs_diff(&x.map(|v| 1.5 * v)) == 0.0);
        let big = g.constant(Tensor::full(&[1, 16, 8], 40.0));
        let out = g.value(fusion_unit(&b, g.constant(x.clone()), big, p).unwrap());
        assert!(out.max_abs_diff(&x.map(|v| 2.0 * v)) < 1e-12);
    }

    #[test]
    fn fusion_of_zero_is_bias() {
        let mut reg = setup(AdapterVariant::Full, true);
        let bias = rand(&[8], 5);
        reg.set("madapter.block1.mlp.fusion.bias", bias.clone()).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let z = g.constant(Tensor::zeros(&[1, 16, 8]));
        let s = g.constant(rand(&[1, 16, 8], 6));
        let out = g.value(fusion_unit(&b, z, s, "madapter.block1.mlp.fusion").unwrap());
        for t in 0..16 {
            for ch in 0..8 {
                assert_eq!(out.data()[t * 8 + ch], bias.data()[ch]);
            }
        }
        let odd = g.constant(Tensor::zeros(&[1, 15, 8]));
        assert!(fusion_unit(&b, odd, odd, "madapter.block1.mlp.fusion").is_err());
    }

    #[test]
    fn parameter_count_matches_formula() {
        for v in [
            AdapterVariant::Full,
            AdapterVariant::NoFusion,
            AdapterVariant::PlainBlock,
            AdapterVariant::PlainSemantic,
        ] {
            let reg = setup(v, false);
            let d = dims(v);
            let align = if d.uses_semantic() { 8 * 32 + 32 } else { 0 };
            assert_eq!(reg.count_owner(Owner::MAdapter), 4 * d.params_per_adapter() + align, "{v:?}");
        }
        let (c, m) = (32, 8);
        assert_eq!(
            dims(AdapterVariant::Full).params_per_adapter(),
            c * m + c * m + 9 * m * m + m * c + (m + m + m + c)
        );
        assert_eq!(setup(AdapterVariant::None, false).len(), 0);
    }

    #[test]
    fn variants_differ_on_random_input() {
        let x = rand(&[1, 16, 32], 7);
        let f_sem = rand(&[1, 8, 12, 12], 8);
        let mut outs = Vec::new();
        for v in [
            AdapterVariant::Full,
            AdapterVariant::NoFusion,
            AdapterVariant::PlainBlock,
            AdapterVariant::PlainSemantic,
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut reg = ParameterRegistry::new();
            register(&mut reg, &mut rng, dims(v)).unwrap();
            randomize_up(&mut reg, &mut rng).unwrap();
            let g = Graph::new();
            let b = reg.bind(&g, BindMode::Inference);
            let ad = Adapters::new(&b, dims(v), g.constant(f_sem.clone()), 4).unwrap();
            let d = ad.delta(&b, 0, Stage::Attention, g.constant(x.clone())).unwrap();
            outs.push((*g.value(d)).clone());
        }
        for i in 0..outs.len() {
            for j in i + 1..outs.len() {
                assert!(outs[i].max_abs_diff(&outs[j]) > 1e-8, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn fusion_unit_gradients() {
        let reg = setup(AdapterVariant::Full, true);
        let p = "madapter.block0.attn.fusion";
        let inputs = vec![
            reg.tensor(&format!("{p}.weight")).unwrap().clone(),
            reg.tensor(&format!("{p}.bias")).unwrap().clone(),
            rand(&[1, 36, 8], 1),
            rand(&[1, 36, 8], 2),
        ];
        assert_gradients(&inputs, |g, v| {
            let b = reg.bind(g, BindMode::Train);
            b.insert(&format!("{p}.weight"), v[0]);
            b.insert(&format!("{p}.bias"), v[1]);
            let out = fusion_unit(&b, v[2], v[3], p)?;
            Ok(g.sum(g.mul(out, out)?))
        });
    }

    #[test]
    fn delta_gradients_cover_every_adapter_entry() {
        let small = AdapterDims {
            width: 6,
            bottleneck: 3,
            sem_dim: 4,
            blocks: 1,
            variant: AdapterVariant::Full,
            shared: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut reg = ParameterRegistry::new();
        register(&mut reg, &mut rng, small).unwrap();
        randomize_up(&mut reg, &mut rng).unwrap();
        let names: Vec<String> = reg.entries().iter().map(|e| e.name.clone()).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| reg.tensor(n).unwrap().clone()).collect();
        inputs.push(rand(&[1, 9, 6], 3));
        inputs.push(rand(&[1, 4, 5, 5], 4));
        let n = names.len();
        assert_gradients(&inputs, |g, v| {
            let b = reg.bind(g, BindMode::Train);
            for (name, &var) in names.iter().zip(v) {
                b.insert(name, var);
            }
            let ad = Adapters::new(&b, small, v[n + 1], 3)?;
            let d = ad.delta(&b, 0, Stage::Attention, v[n])?;
            Ok(g.sum(g.mul(d, d)?))
        });
    }
}
