//! Three-scale 2-D CNN over the pseudo-image.
//!
//! Blocks run at strides 1, 2 and 4 relative to the input with channel
//! widths `C`, `2C` and `4C`. The coarser outputs are projected back to `C`
//! channels with a 1x1 convolution, upsampled by nearest neighbour and
//! concatenated with the first block into a `(3C, H, W)` map.

use crate::error::{Error, Result};
use crate::nn::{kaiming_uniform, Graph, ParamStore, Tensor, Var};

/// Parameter names and shapes of the backbone for feature width `c`.
fn layout(c: usize) -> Vec<(String, [usize; 4])> {
    let convs: [(&str, usize, usize, usize); 8] = [
        ("block1.conv0", c, c, 3),
        ("block1.conv1", c, c, 3),
        ("block2.conv0", c, 2 * c, 3),
        ("block2.conv1", 2 * c, 2 * c, 3),
        ("block3.conv0", 2 * c, 4 * c, 3),
        ("block3.conv1", 4 * c, 4 * c, 3),
        ("up2", 2 * c, c, 1),
        ("up3", 4 * c, c, 1),
    ];
    convs
        .iter()
        .map(|&(n, ci, co, k)| (format!("backbone.{n}"), [co, ci, k, k]))
        .collect()
}

pub fn init_backbone(store: &mut ParamStore, channels: usize, seed: u64) -> Result<()> {
    for (name, shape) in layout(channels) {
        let fan_in = shape[1] * shape[2] * shape[3];
        let wname = format!("{name}.weight");
        store.insert(&wname, kaiming_uniform(&shape, fan_in, seed, &wname))?;
        store.insert(&format!("{name}.bias"), Tensor::zeros(&[shape[0]]))?;
    }
    Ok(())
}

fn conv_relu(g: &mut Graph, store: &ParamStore, x: Var, name: &str, stride: usize) -> Result<Var> {
    let w = g.param(store, &format!("backbone.{name}.weight"))?;
    let b = g.param(store, &format!("backbone.{name}.bias"))?;
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, Some(b), stride, pad)?;
    Ok(g.relu(y))
}

/// `(C, H, W)` pseudo-image to `(3C, H, W)` BEV features. `H` and `W` must
/// be divisible by 4.
pub fn backbone_forward(g: &mut Graph, pseudo: Var, store: &ParamStore) -> Result<Var> {
    let s = g.shape(pseudo).to_vec();
    if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::shape("backbone", format!("input {s:?}: H and W must be positive multiples of 4")));
    }
    let b1 = conv_relu(g, store, pseudo, "block1.conv0", 1)?;
    let b1 = conv_relu(g, store, b1, "block1.conv1", 1)?;
    let b2 = conv_relu(g, store, b1, "block2.conv0", 2)?;
    let b2 = conv_relu(g, store, b2, "block2.conv1", 1)?;
    let b3 = conv_relu(g, store, b2, "block3.conv0", 2)?;
    let b3 = conv_relu(g, store, b3, "block3.conv1", 1)?;
    // A pointwise conv + ReLU commutes with nearest upsampling, so the
    // projection runs at the coarse resolution.
    let u2 = conv_relu(g, store, b2, "up2", 1)?;
    let u2 = g.upsample_nearest(u2, 2)?;
    let u3 = conv_relu(g, store, b3, "up3", 1)?;
    let u3 = g.upsample_nearest(u3, 4)?;
    g.concat0(&[b1, u2, u3])
}
