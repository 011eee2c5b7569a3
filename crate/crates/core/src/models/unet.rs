//! Encoder-decoder U-Net with same-padded convolutions.

use rand::Rng;

use crate::error::Result;
use crate::nn::{Conv2dLayer, ConvBlock, Graph, Mode, ParamStore, Real, UpConvLayer, Var};

use super::UNetSpec;

#[derive(Debug, Clone)]
pub struct UNet {
    pub encoders: Vec<ConvBlock>,
    /// `ups[k]` maps level `k + 1` back to level `k`.
    pub ups: Vec<UpConvLayer>,
    pub decoders: Vec<ConvBlock>,
    pub head: Conv2dLayer,
}

impl UNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, spec: &UNetSpec, rng: &mut impl Rng) -> Self {
        let l = spec.depth;
        let encoders = (0..l)
            .map(|i| {
                let cin = if i == 0 { spec.in_channels } else { spec.channels(i - 1) };
                ConvBlock::new(store, &format!("enc{i}"), cin, spec.channels(i), spec.dropout_rate, rng)
            })
            .collect();
        let mut ups = Vec::with_capacity(l - 1);
        let mut decoders = Vec::with_capacity(l - 1);
        for k in 0..l - 1 {
            ups.push(UpConvLayer::new(store, &format!("up{k}"), spec.channels(k + 1), spec.channels(k), rng));
            decoders.push(ConvBlock::new(
                store,
                &format!("dec{k}"),
                2 * spec.channels(k),
                spec.channels(k),
                spec.dropout_rate,
                rng,
            ));
        }
        let head = Conv2dLayer::new(store, "head", spec.channels(0), spec.num_classes, 1, rng);
        Self { encoders, ups, decoders, head }
    }

    /// Returns the logits `[B, c, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let mut skips = Vec::with_capacity(self.encoders.len());
        let mut h = x;
        for (i, block) in self.encoders.iter().enumerate() {
            if i > 0 {
                h = g.maxpool2(h)?;
            }
            h = block.forward(g, store, h, mode, rng)?;
            skips.push(h);
        }
        for k in (0..self.decoders.len()).rev() {
            let up = self.ups[k].forward(g, store, h)?;
            let cat = g.concat_all(&[skips[k], up])?;
            h = self.decoders[k].forward(g, store, cat, mode, rng)?;
        }
        self.head.forward(g, store, h)
    }
}
