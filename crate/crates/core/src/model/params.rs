use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::Result;
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::ssm::{trunc_normal, SsmParams};

/// Pre-norm two-layer MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<W> {
    pub norm: W,
    /// `[E, hidden]`
    pub w_in: W,
    /// `[hidden, E]`
    pub w_out: W,
}

/// Query projection plus key/value SSMs; there are no key/value projections.
#[derive(Clone, Debug, PartialEq)]
pub struct AttambaBlock<W> {
    pub norm: W,
    pub w_q: W,
    pub ssm_k: SsmParams<W>,
    pub ssm_v: SsmParams<W>,
    pub w_o: W,
    pub ffn: Ffn<W>,
}

/// Standard attention with projections into dimension F.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineBlock<W> {
    pub norm: W,
    /// `[E, F]`
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    /// `[F, E]`
    pub w_o: W,
    pub ffn: Ffn<W>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block<W> {
    Attamba(AttambaBlock<W>),
    Baseline(BaselineBlock<W>),
}

/// All trainable weights; the output head is tied to `embedding`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<W> {
    /// `[V, E]`
    pub embedding: W,
    pub blocks: Vec<Block<W>>,
    pub final_norm: W,
}

type Namer<'a, 'w, W, U> = &'a mut dyn FnMut(String, &'w W) -> U;

impl<W> Ffn<W> {
    fn map<'w, U>(&'w self, p: &str, f: Namer<'_, 'w, W, U>) -> Ffn<U> {
        Ffn {
            norm: f(format!("{p}.norm"), &self.norm),
            w_in: f(format!("{p}.w_in"), &self.w_in),
            w_out: f(format!("{p}.w_out"), &self.w_out),
        }
    }

    fn for_each_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut W)) {
        f(format!("{p}.norm"), &mut self.norm);
        f(format!("{p}.w_in"), &mut self.w_in);
        f(format!("{p}.w_out"), &mut self.w_out);
    }
}

fn map_ssm<'w, W, U>(s: &'w SsmParams<W>, p: &str, f: Namer<'_, 'w, W, U>) -> SsmParams<U> {
    s.map(|name, w| f(format!("{p}.{name}"), w))
}

impl<W> Block<W> {
    fn map<'w, U>(&'w self, p: &str, f: Namer<'_, 'w, W, U>) -> Block<U> {
        match self {
            Block::Attamba(b) => Block::Attamba(AttambaBlock {
                norm: f(format!("{p}.norm"), &b.norm),
                w_q: f(format!("{p}.w_q"), &b.w_q),
                ssm_k: map_ssm(&b.ssm_k, &format!("{p}.ssm_k"), f),
                ssm_v: map_ssm(&b.ssm_v, &format!("{p}.ssm_v"), f),
                w_o: f(format!("{p}.w_o"), &b.w_o),
                ffn: b.ffn.map(&format!("{p}.ffn"), f),
            }),
            Block::Baseline(b) => Block::Baseline(BaselineBlock {
                norm: f(format!("{p}.norm"), &b.norm),
                w_q: f(format!("{p}.w_q"), &b.w_q),
                w_k: f(format!("{p}.w_k"), &b.w_k),
                w_v: f(format!("{p}.w_v"), &b.w_v),
                w_o: f(format!("{p}.w_o"), &b.w_o),
                ffn: b.ffn.map(&format!("{p}.ffn"), f),
            }),
        }
    }

    fn for_each_mut(&mut self, p: &str, f: &mut dyn FnMut(String, &mut W)) {
        match self {
            Block::Attamba(b) => {
                f(format!("{p}.norm"), &mut b.norm);
                f(format!("{p}.w_q"), &mut b.w_q);
                for (name, w) in b.ssm_k.fields_mut() {
                    f(format!("{p}.ssm_k.{name}"), w);
                }
                for (name, w) in b.ssm_v.fields_mut() {
                    f(format!("{p}.ssm_v.{name}"), w);
                }
                f(format!("{p}.w_o"), &mut b.w_o);
                b.ffn.for_each_mut(&format!("{p}.ffn"), f);
            }
            Block::Baseline(b) => {
                f(format!("{p}.norm"), &mut b.norm);
                f(format!("{p}.w_q"), &mut b.w_q);
                f(format!("{p}.w_k"), &mut b.w_k);
                f(format!("{p}.w_v"), &mut b.w_v);
                f(format!("{p}.w_o"), &mut b.w_o);
                b.ffn.for_each_mut(&format!("{p}.ffn"), f);
            }
        }
    }
}

impl<W> ModelParams<W> {
    /// Applies `f` to every weight with its dotted name, preserving layout.
    pub fn map<'w, U>(&'w self, mut f: impl FnMut(String, &'w W) -> U) -> ModelParams<U> {
        let f: Namer<'_, 'w, W, U> = &mut f;
        ModelParams {
            embedding: f("embedding".into(), &self.embedding),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}"), f)).collect(),
            final_norm: f("final_norm".into(), &self.final_norm),
        }
    }

    /// Every weight with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        self.map(|name, w| out.push((name, w)));
        out
    }

    /// Same layout filled from `items`, given in [`named`](Self::named) order.
    ///
    /// # Panics
    /// If `items` does not hold exactly one entry per weight.
    pub fn rebind<U: Clone>(&self, items: &[U]) -> ModelParams<U> {
        assert_eq!(items.len(), self.named().len(), "one item per weight");
        let mut it = items.iter();
        self.map(|_, _| it.next().unwrap().clone())
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(String, &mut W)) {
        let f: &mut dyn FnMut(String, &mut W) = &mut f;
        f("embedding".into(), &mut self.embedding);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), f);
        }
        f("final_norm".into(), &mut self.final_norm);
    }
}

impl<T: Scalar> ModelParams<Tensor<T>> {
    /// Records every weight on `tape` as a trainable input.
    pub fn register(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.map(|_, t| tape.param(t.clone()))
    }

    /// Records every weight as a constant.
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> ModelParams<Var> {
        self.map(|_, t| tape.leaf(t.clone()))
    }

    /// Every tensor, in [`named`](ModelParams::named) order.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<Tensor<U>> {
        self.map(|_, t| t.cast())
    }

    /// Loads named tensors produced by [`named`](Self::named) (e.g. from a
    /// checkpoint) into a parameter set shaped by `cfg`.
    pub fn from_named(cfg: &ModelConfig, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut out = init_params::<T>(cfg, 0)?;
        let mut missing = None;
        out.for_each_mut(|name, slot| match tensors.iter().find(|(n, _)| *n == name) {
            Some((_, t)) if t.shape() == slot.shape() => *slot = t.clone(),
            _ => {
                missing.get_or_insert(name);
            }
        });
        match missing {
            Some(name) => Err(crate::Error::Config(format!("tensor `{name}` missing or mis-shaped"))),
            None if tensors.len() != out.named().len() => {
                Err(crate::Error::Config(format!("expected {} tensors, got {}", out.named().len(), tensors.len())))
            }
            None => Ok(out),
        }
    }
}

/// Gradients for every weight, zero-filled where the tape recorded none.
pub fn collect_grads<T: Scalar>(
    params: &ModelParams<Tensor<T>>,
    vars: &ModelParams<Var>,
    grads: &crate::numerics::Gradients<T>,
) -> ModelParams<Tensor<T>> {
    let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut i = 0;
    vars.map(|_, &v| {
        let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&shapes[i]));
        i += 1;
        g
    })
}

/// Reproducible initialization from `seed`: truncated normal (σ = 0.02) for
/// projections and embeddings, unit norms, SSMs per [`SsmParams::init`].
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<Tensor<T>>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = cfg.dim;
    let hidden = cfg.ffn_hidden();
    let normal = |rng: &mut ChaCha8Rng, shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(trunc_normal(rng, 0.02)));
    let ones = |n: usize| Tensor::full(&[n], T::one());

    let embedding = normal(&mut rng, &[cfg.vocab, e]);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let block = if cfg.mode.is_baseline() {
            let f = cfg.attn_dim();
            Block::Baseline(BaselineBlock {
                norm: ones(e),
                w_q: normal(&mut rng, &[e, f]),
                w_k: normal(&mut rng, &[e, f]),
                w_v: normal(&mut rng, &[e, f]),
                w_o: normal(&mut rng, &[f, e]),
                ffn: Ffn { norm: ones(e), w_in: normal(&mut rng, &[e, hidden]), w_out: normal(&mut rng, &[hidden, e]) },
            })
        } else {
            let w_q = normal(&mut rng, &[e, e]);
            let ssm_k = SsmParams::init(e, cfg.state_dim, &mut rng);
            let ssm_v = SsmParams::init(e, cfg.state_dim, &mut rng);
            Block::Attamba(AttambaBlock {
                norm: ones(e),
                w_q,
                ssm_k,
                ssm_v,
                w_o: normal(&mut rng, &[e, e]),
                ffn: Ffn { norm: ones(e), w_in: normal(&mut rng, &[e, hidden]), w_out: normal(&mut rng, &[hidden, e]) },
            })
        };
        blocks.push(block);
    }
    Ok(ModelParams { embedding, blocks, final_norm: ones(e) })
}
