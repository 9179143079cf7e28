use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::EncoderSpec;
use crate::diffcore::{kaiming_uniform, Axis, DiffError, ParamId, Var};
use crate::{Graph, ParamStore, Tensor};

const WEIGHT_NORM_EPS: f64 = 1e-8;
const PRELU_INIT: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    direction: ParamId,
    scale: ParamId,
    bias: ParamId,
    slope: ParamId,
    dilation: usize,
}

impl ConvLayer {
    fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let dir: Tensor = kaiming_uniform(&[c_out, c_in, k], c_in * k, rng);
        let per = c_in * k;
        let norms: Vec<f64> = (0..c_out)
            .map(|o| {
                dir.data()[o * per..(o + 1) * per]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(Self {
            direction: store.add(format!("{prefix}.direction"), dir)?,
            scale: store.add(format!("{prefix}.scale"), Tensor::from_vec(norms))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[c_out]))?,
            slope: store.add(format!("{prefix}.prelu"), Tensor::full(&[c_out], PRELU_INIT))?,
            dilation,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        dropout: f64,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, DiffError> {
        let dir = g.param(store, self.direction);
        let scale = g.param(store, self.scale);
        let w = g.weight_norm(dir, scale, WEIGHT_NORM_EPS)?;
        let y = g.conv1d(x, w, self.dilation)?;
        let b = g.param(store, self.bias);
        let y = g.channel_bias(y, b)?;
        let a = g.param(store, self.slope);
        let y = g.prelu(y, a, Axis::Rows)?;
        match rng {
            Some(r) => g.dropout(y, dropout, r),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    convs: [ConvLayer; 2],
    /// 1x1 projection when the block changes width.
    skip: Option<(ParamId, ParamId)>,
}

/// Stack of residual blocks of two causal dilated convolutions each. Block
/// `i` uses dilation `r^i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tcn {
    spec: EncoderSpec,
    blocks: Vec<Block>,
}

impl Tcn {
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_channels: usize,
        spec: &EncoderSpec,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let mut blocks = Vec::with_capacity(spec.block_channels.len());
        let mut c_in = in_channels;
        for (i, &c_out) in spec.block_channels.iter().enumerate() {
            let d = spec.dilation_base.pow(i as u32);
            let p = format!("{prefix}.block{i}");
            let first = ConvLayer::build(store, &format!("{p}.conv0"), c_in, c_out, spec.kernel_size, d, rng)?;
            let second = ConvLayer::build(store, &format!("{p}.conv1"), c_out, c_out, spec.kernel_size, d, rng)?;
            let skip = if c_in != c_out {
                let w: Tensor = kaiming_uniform(&[c_out, c_in, 1], c_in, rng);
                Some((
                    store.add(format!("{p}.skip.weight"), w)?,
                    store.add(format!("{p}.skip.bias"), Tensor::zeros(&[c_out]))?,
                ))
            } else {
                None
            };
            blocks.push(Block {
                convs: [first, second],
                skip,
            });
            c_in = c_out;
        }
        Ok(Self {
            spec: spec.clone(),
            blocks,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// `[C_in x T] -> [D x T]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, DiffError> {
        let mut x = input;
        for block in &self.blocks {
            let h = block.convs[0].forward(g, store, x, self.spec.dropout, rng.as_deref_mut())?;
            let h = block.convs[1].forward(g, store, h, self.spec.dropout, rng.as_deref_mut())?;
            let res = match block.skip {
                Some((w, b)) => {
                    let wv = g.param(store, w);
                    let y = g.conv1d(x, wv, 1)?;
                    let bv = g.param(store, b);
                    g.channel_bias(y, bv)?
                }
                None => x,
            };
            x = g.add(h, res)?;
        }
        Ok(x)
    }
}

/// Fully connected network with PReLU between layers, operating on `[B x F]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId, Option<ParamId>)>,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        lr_multiplier: f64,
        rng: &mut R,
    ) -> Result<Self, DiffError> {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut f_in = input;
        for i in 0..=hidden_layers {
            let last = i == hidden_layers;
            let f_out = if last { output } else { hidden };
            let w: Tensor = kaiming_uniform(&[f_out, f_in], f_in, rng);
            let wid = store.add_with_multiplier(format!("{prefix}.layer{i}.weight"), w, lr_multiplier)?;
            let bid = store.add_with_multiplier(
                format!("{prefix}.layer{i}.bias"),
                Tensor::zeros(&[f_out]),
                lr_multiplier,
            )?;
            let slope = if last {
                None
            } else {
                Some(store.add_with_multiplier(
                    format!("{prefix}.layer{i}.prelu"),
                    Tensor::full(&[f_out], PRELU_INIT),
                    lr_multiplier,
                )?)
            };
            layers.push((wid, bid, slope));
            f_in = f_out;
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: Var) -> Result<Var, DiffError> {
        let mut x = input;
        for &(w, b, slope) in &self.layers {
            let wv = g.param(store, w);
            let bv = g.param(store, b);
            x = g.linear(x, wv, bv)?;
            if let Some(a) = slope {
                let av = g.param(store, a);
                x = g.prelu(x, av, Axis::Cols)?;
            }
        }
        Ok(x)
    }

    /// Weight and bias of the output layer.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        let &(w, b, _) = self.layers.last().expect("at least one layer");
        (w, b)
    }
}
