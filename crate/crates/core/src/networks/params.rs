use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchConfig, BlockVariant};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub weight: usize,
    pub bias: Option<usize>,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub weight: usize,
    pub bias: usize,
}

/// Parameter indices of one residual transformer-style block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RtbParams {
    SimpleResidual {
        norm: NormParams,
        conv1: ConvParams,
        conv2: ConvParams,
    },
    TransposedAttention {
        norm1: NormParams,
        temperature: usize,
        q: ConvParams,
        k: ConvParams,
        v: ConvParams,
        q_dw: ConvParams,
        k_dw: ConvParams,
        v_dw: ConvParams,
        proj: ConvParams,
        norm2: NormParams,
        ffn_gate: ConvParams,
        ffn_value: ConvParams,
        ffn_gate_dw: ConvParams,
        ffn_value_dw: ConvParams,
        ffn_out: ConvParams,
    },
}

impl RtbParams {
    /// The convolutions whose output is added back onto the residual stream.
    pub fn residual_projections(&self) -> Vec<ConvParams> {
        match self {
            RtbParams::SimpleResidual { conv2, .. } => vec![*conv2],
            RtbParams::TransposedAttention { proj, ffn_out, .. } => vec![*proj, *ffn_out],
        }
    }
}

/// Where every parameter of the three networks lives in the flat list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub illum: Vec<ConvParams>,
    pub refl_embed: ConvParams,
    pub refl_blocks: Vec<RtbParams>,
    pub refl_proj: ConvParams,
    pub glare_embed: ConvParams,
    pub glare_blocks: Vec<RtbParams>,
    pub glare_head: ConvParams,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> ConvParams {
        let fan_in = cin / groups * k * k;
        let weight = self.add(format!("{prefix}.weight"), vec![cout, cin / groups, k, k], Init::Uniform { fan_in });
        let bias = bias.then(|| self.add(format!("{prefix}.bias"), vec![cout], Init::Uniform { fan_in }));
        ConvParams { weight, bias, padding: k / 2, groups }
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormParams {
        NormParams {
            weight: self.add(format!("{prefix}.weight"), vec![c], Init::Const(1.0)),
            bias: self.add(format!("{prefix}.bias"), vec![c], Init::Const(0.0)),
        }
    }

    fn block(&mut self, prefix: &str, arch: &ArchConfig) -> RtbParams {
        let c = arch.feat_channels;
        match arch.block {
            BlockVariant::SimpleResidual => RtbParams::SimpleResidual {
                norm: self.norm(&format!("{prefix}.norm"), c),
                conv1: self.conv(&format!("{prefix}.conv1"), c, c, 3, 1, true),
                conv2: self.conv(&format!("{prefix}.conv2"), c, c, 3, 1, true),
            },
            BlockVariant::TransposedAttention => {
                let hidden = arch.ffn_hidden();
                RtbParams::TransposedAttention {
                    norm1: self.norm(&format!("{prefix}.norm1"), c),
                    temperature: self.add(format!("{prefix}.attn.temperature"), vec![1, arch.heads, 1, 1], Init::Const(1.0)),
                    q: self.conv(&format!("{prefix}.attn.q"), c, c, 1, 1, false),
                    k: self.conv(&format!("{prefix}.attn.k"), c, c, 1, 1, false),
                    v: self.conv(&format!("{prefix}.attn.v"), c, c, 1, 1, false),
                    q_dw: self.conv(&format!("{prefix}.attn.q_dw"), c, c, 3, c, false),
                    k_dw: self.conv(&format!("{prefix}.attn.k_dw"), c, c, 3, c, false),
                    v_dw: self.conv(&format!("{prefix}.attn.v_dw"), c, c, 3, c, false),
                    proj: self.conv(&format!("{prefix}.attn.proj"), c, c, 1, 1, false),
                    norm2: self.norm(&format!("{prefix}.norm2"), c),
                    ffn_gate: self.conv(&format!("{prefix}.ffn.gate"), c, hidden, 1, 1, false),
                    ffn_value: self.conv(&format!("{prefix}.ffn.value"), c, hidden, 1, 1, false),
                    ffn_gate_dw: self.conv(&format!("{prefix}.ffn.gate_dw"), hidden, hidden, 3, hidden, false),
                    ffn_value_dw: self.conv(&format!("{prefix}.ffn.value_dw"), hidden, hidden, 3, hidden, false),
                    ffn_out: self.conv(&format!("{prefix}.ffn.out"), hidden, c, 1, 1, false),
                }
            }
        }
    }
}

fn build(arch: &ArchConfig) -> (Layout, Vec<ParamSpec>) {
    let mut b = Builder::default();
    let ic = arch.illum_channels;
    let widths = [3, ic, ic, ic, ic, 1];
    let illum = (0..5)
        .map(|i| b.conv(&format!("n_i.conv{}", i + 1), widths[i], widths[i + 1], 3, 1, true))
        .collect();
    let c = arch.feat_channels;
    let refl_embed = b.conv("n_r.embed", 6, c, 1, 1, true);
    let refl_blocks = (0..arch.reflect_blocks).map(|i| b.block(&format!("n_r.block{i}"), arch)).collect();
    let refl_proj = b.conv("n_r.proj", c, 3, 1, 1, true);
    let glare_embed = b.conv("n_g.embed", 3, c, 1, 1, true);
    let glare_blocks = (0..arch.glare_blocks).map(|i| b.block(&format!("n_g.block{i}"), arch)).collect();
    let glare_head = b.conv("n_g.head", c, 3, 1, 1, true);
    let layout = Layout { illum, refl_embed, refl_blocks, refl_proj, glare_embed, glare_blocks, glare_head };
    (layout, b.specs)
}

/// Named parameters of N_I, N_R and N_G.
///
/// Names and shapes are a pure function of the [`ArchConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    arch: ArchConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Parameters placed on a [`Graph`]; `vars[i]` holds parameter `i`.
pub struct BoundModel<'a> {
    pub layout: &'a Layout,
    pub arch: &'a ArchConfig,
    pub vars: Vec<Var>,
}

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters drawn from a seeded stream; identical values (up to
    /// rounding) for every scalar type.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = build(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    Tensor::from_fn(&s.shape, |_| T::of(rng.gen_range(-bound..bound)))
                }
                Init::Const(v) => Tensor::full(&s.shape, T::of(v)),
            })
            .collect();
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(ModelParams { arch, layout, names, tensors })
    }

    /// Reassembles parameters from named tensors, checking them against `arch`.
    pub fn from_named(arch: ArchConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        arch.validate()?;
        let (layout, specs) = build(&arch);
        if named.len() != specs.len() {
            return Err(Error::shape(format!(
                "architecture has {} parameters, got {}",
                specs.len(),
                named.len()
            )));
        }
        let mut by_name: HashMap<String, Tensor<T>> = named.into_iter().collect();
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = by_name
                .remove(&s.name)
                .ok_or_else(|| Error::shape(format!("missing parameter {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, architecture expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            tensors.push(t);
        }
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(ModelParams { arch, layout, names, tensors })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Zeroes every residual-branch output projection, making each block the identity.
    pub fn zero_residual_projections(&mut self) {
        let blocks: Vec<RtbParams> =
            self.layout.refl_blocks.iter().chain(&self.layout.glare_blocks).cloned().collect();
        for block in blocks {
            for conv in block.residual_projections() {
                self.tensors[conv.weight].data_mut().iter_mut().for_each(|v| *v = T::zero());
                if let Some(b) = conv.bias {
                    self.tensors[b].data_mut().iter_mut().for_each(|v| *v = T::zero());
                }
            }
        }
    }

    /// Places every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        BoundModel { layout: &self.layout, arch: &self.arch, vars }
    }

    /// Adds the graph gradients of a trainable binding into the parameter buffers.
    ///
    /// Parameters the loss does not reach receive an explicit zero gradient.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, bound_vars: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(bound_vars) {
            match g.grad(v) {
                Some(gr) => t.accumulate_grad(gr)?,
                None => t.accumulate_grad(&vec![T::zero(); t.len()])?,
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_dotted() {
        for block in [BlockVariant::SimpleResidual, BlockVariant::TransposedAttention] {
            let arch = ArchConfig { block, ..ArchConfig::default() };
            let p = ModelParams::<f32>::init(arch, 0).unwrap();
            let mut names = p.names().to_vec();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), p.names().len());
            assert!(p.names().iter().all(|n| n.contains('.')));
            assert!(p.get("n_i.conv3.weight").is_some());
        }
    }

    #[test]
    fn param_count_is_a_function_of_arch() {
        let a = ModelParams::<f32>::init(ArchConfig::default(), 1).unwrap();
        let b = ModelParams::<f64>::init(ArchConfig::default(), 2).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        // n_i: (3·16·9+16) + 3·(16·16·9+16) + (16·9+1)     = 7553
        // n_r: (6·16+16) + 2·(2·16 + 2·(16·16·9+16)) + 51  = 9507
        // n_g: (3·16+16) + 2·(2·16 + 2·(16·16·9+16)) + 51  = 9459
        assert_eq!(a.param_count(), 7553 + 9507 + 9459);
    }

    #[test]
    fn same_seed_same_values_across_precision() {
        let a = ModelParams::<f32>::init(ArchConfig::default(), 7).unwrap();
        let b = ModelParams::<f64>::init(ArchConfig::default(), 7).unwrap();
        assert_eq!(a, b.cast::<f32>());
    }

    #[test]
    fn from_named_checks_shapes() {
        let p = ModelParams::<f32>::init(ArchConfig::default(), 0).unwrap();
        let named: Vec<_> = p.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let q = ModelParams::from_named(ArchConfig::default(), named.clone()).unwrap();
        assert_eq!(p, q);

        let mut bad = named;
        bad[0].1 = Tensor::zeros(&[1]);
        assert!(ModelParams::from_named(ArchConfig::default(), bad).is_err());
    }
}
