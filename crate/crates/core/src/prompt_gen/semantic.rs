use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{normal_init, Binding, Owner, ParameterRegistry};
use crate::tensor::Tensor;

pub const PROMPT_GEN: &str = "prompt_gen";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SemanticDims {
    pub num_queries: usize,
    pub query_dim: usize,
    /// Channels of the fused semantic feature.
    pub sem_dim: usize,
    /// Channels of the decoder's prompt tokens.
    pub embed_dim: usize,
    pub heads: usize,
}

pub fn register_semantic(reg: &mut ParameterRegistry, rng: &mut impl Rng, d: SemanticDims) -> Result<()> {
    let o = Owner::PromptGen;
    let cq = d.query_dim;
    nn::register_conv(reg, rng, o, &format!("{PROMPT_GEN}.sem_proj"), d.sem_dim, cq, 1)?;
    reg.register(
        format!("{PROMPT_GEN}.queries"),
        o,
        normal_init(rng, &[d.num_queries, cq], 1.0),
    )?;
    nn::register_attention(reg, rng, o, &format!("{PROMPT_GEN}.cross_attn"), cq, cq, cq, Some(cq))?;
    nn::register_attention(reg, rng, o, &format!("{PROMPT_GEN}.self_attn"), cq, cq, cq, Some(cq))?;
    nn::register_linear(reg, rng, o, &format!("{PROMPT_GEN}.out"), cq, d.embed_dim)
}

/// `P_sem = Linear(SelfAttn(CrossAttn(Q, Q_sem)))` for `f_sem: [B, c_sem, h, w]`,
/// giving `[B, N, embed_dim]`. Each attention is residual; queries carry no
/// positional encoding.
pub fn generate_semantic_prompts(b: &Binding, f_sem: Var, heads: usize) -> Result<Var> {
    let g = b.graph();
    let s = g.shape(f_sem);
    if s.len() != 4 {
        return Err(Error::shape(format!("f_sem must be NCHW, got {s:?}")));
    }
    let q_sem = nn::conv(b, f_sem, &format!("{PROMPT_GEN}.sem_proj"), 1, 0)?;
    let q_sem = nn::to_tokens(g, q_sem)?;

    let queries = b.param(&format!("{PROMPT_GEN}.queries"))?;
    let qs = g.shape(queries);
    let zeros = g.constant(Tensor::zeros(&[s[0], qs[0], qs[1]]));
    let q = g.add(zeros, queries)?;

    let a = nn::attention(b, q, q_sem, q_sem, &format!("{PROMPT_GEN}.cross_attn"), heads)?;
    let q = g.add(q, a)?;
    let a = nn::attention(b, q, q, q, &format!("{PROMPT_GEN}.self_attn"), heads)?;
    let q = g.add(q, a)?;
    nn::linear(b, q, &format!("{PROMPT_GEN}.out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::assert_gradients;
    use crate::autograd::Graph;
    use crate::params::BindMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(n: usize) -> SemanticDims {
        SemanticDims {
            num_queries: n,
            query_dim: 32,
            sem_dim: 8,
            embed_dim: 24,
            heads: 1,
        }
    }

    fn setup(n: usize) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        register_semantic(&mut reg, &mut ChaCha8Rng::seed_from_u64(5), dims(n)).unwrap();
        reg
    }

    fn f_sem(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[1, 8, 12, 12], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn shape_contract() {
        let reg = setup(30);
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let p = generate_semantic_prompts(&b, g.constant(f_sem(0)), 1).unwrap();
        assert_eq!(g.shape(p), vec![1, 30, 24]);
    }

    #[test]
    fn identical_queries_on_constant_feature_give_identical_rows() {
        let mut reg = setup(4);
        let row: Vec<f64> = reg.tensor("prompt_gen.queries").unwrap().data()[..32].to_vec();
        let same = Tensor::from_fn(&[4, 32], |i| row[i % 32]);
        reg.set("prompt_gen.queries", same).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let constant = Tensor::from_fn(&[1, 8, 12, 12], |i| (i / 144) as f64 * 0.1 - 0.3);
        let p = g.value(generate_semantic_prompts(&b, g.constant(constant), 1).unwrap());
        let first = p.narrow(1, 0, 1);
        for r in 1..4 {
            assert!(p.narrow(1, r, 1).max_abs_diff(&first) < 1e-12);
        }
    }

    #[test]
    fn query_permutation_permutes_prompts() {
        let mut reg = setup(5);
        let g = Graph::new();
        let x = f_sem(3);
        let base = {
            let b = reg.bind(&g, BindMode::Inference);
            (*g.value(generate_semantic_prompts(&b, g.constant(x.clone()), 1).unwrap())).clone()
        };
        let perm = [3, 0, 4, 1, 2];
        let q = reg.tensor("prompt_gen.queries").unwrap().clone();
        let rows: Vec<Tensor> = perm.iter().map(|&r| q.narrow(0, r, 1)).collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        reg.set("prompt_gen.queries", Tensor::concat(&refs, 0).unwrap()).unwrap();
        let g = Graph::new();
        let b = reg.bind(&g, BindMode::Inference);
        let out = g.value(generate_semantic_prompts(&b, g.constant(x), 1).unwrap());
        for (i, &r) in perm.iter().enumerate() {
            assert!(out.narrow(1, i, 1).max_abs_diff(&base.narrow(1, r, 1)) < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let small = SemanticDims {
            num_queries: 3,
            query_dim: 4,
            sem_dim: 3,
            embed_dim: 4,
            heads: 1,
        };
        let mut reg = ParameterRegistry::new();
        register_semantic(&mut reg, &mut ChaCha8Rng::seed_from_u64(9), small).unwrap();
        let names: Vec<String> = reg.entries().iter().map(|e| e.name.clone()).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|n| reg.tensor(n).unwrap().clone()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        inputs.push(Tensor::from_fn(&[1, 3, 3, 3], |_| rng.gen_range(-1.0..1.0)));
        assert_gradients(&inputs, |g, vars| {
            let b = reg.bind(g, BindMode::Train);
            for (n, &v) in names.iter().zip(vars) {
                b.insert(n, v);
            }
            let p = generate_semantic_prompts(&b, vars[names.len()], 1)?;
            let sq = g.mul(p, p)?;
            Ok(g.sum(sq))
        });
    }
}
