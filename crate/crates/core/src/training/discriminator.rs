use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Three 3×3 convolutions (ReLU after the first two), global average
/// pooling and a sigmoid: one probability per batch element. Owns its
/// parameters so it can be optimized separately from the network.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    pub convs: [Conv2d; 3],
    pub in_channels: usize,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let convs = [
            Conv2d::new(&mut store, "disc.conv0", in_channels, hidden, 3, 1, 1, true, rng),
            Conv2d::new(&mut store, "disc.conv1", hidden, hidden, 3, 1, 1, true, rng),
            Conv2d::new(&mut store, "disc.conv2", hidden, 1, 3, 1, 1, true, rng),
        ];
        Self { store, convs, in_channels }
    }

    /// `[B, 1, 1, 1]` probabilities.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with(&self.store, g, x)
    }

    /// [`Self::forward`] with weights from `store` (same layout as `self.store`).
    pub fn forward_with(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied();
        if g.shape(x).len() != 4 || c != Some(self.in_channels) {
            return Err(Error::Shape(format!(
                "discriminator expects [B, {}, H, W], got {:?}",
                self.in_channels,
                g.shape(x)
            )));
        }
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        let h = g.global_avg_pool(h)?;
        Ok(g.sigmoid(h))
    }

    pub fn probability(&self, features: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let p = self.forward(&mut g, x)?;
        Ok(g.value(p).data().to_vec())
    }
}
