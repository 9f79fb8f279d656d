//! Network definitions. Each function is written against [`ParamScope`], so
//! the same code both initializes and evaluates a network.
//!
//! All generators work on NCHW inputs at the working resolution and return
//! pre-activation outputs; the caller applies the bounded output map.

use crate::autograd::Var;
use crate::nn::ParamScope;

use super::ArchName;

const CRITIC_SLOPE: f64 = 0.2;

fn residual_block(ps: &mut ParamScope, x: &Var) -> Var {
    let c = x.shape()[1];
    let h = ps.conv(x, c, 3, 1, 1);
    let h = ps.instance_norm(&h).relu();
    let h = ps.conv(&h, c, 3, 1, 1);
    let h = ps.instance_norm(&h);
    x.add(&h)
}

fn up_conv(ps: &mut ParamScope, x: &Var, c_out: usize) -> Var {
    ps.conv(&x.upsample2x(), c_out, 3, 1, 1)
}

/// Two stride-2 downsamplings, `blocks` residual blocks, two upsamplings.
fn resnet(ps: &mut ParamScope, x: &Var, width: usize, blocks: usize, out: usize) -> Var {
    let h = ps.conv(x, width, 3, 1, 1);
    let h = ps.instance_norm(&h).relu();
    let h = ps.conv(&h, 2 * width, 4, 2, 1);
    let h = ps.instance_norm(&h).relu();
    let h = ps.conv(&h, 4 * width, 4, 2, 1);
    let mut h = ps.instance_norm(&h).relu();
    for _ in 0..blocks {
        h = residual_block(ps, &h);
    }
    let h = up_conv(ps, &h, 2 * width);
    let h = ps.instance_norm(&h).relu();
    let h = up_conv(ps, &h, width);
    let h = ps.instance_norm(&h).relu();
    ps.conv_head(&h, out, 3, 1)
}

/// Plain convolution stack without normalization or skips.
fn cnet(ps: &mut ParamScope, x: &Var, width: usize, out: usize) -> Var {
    let h = ps.conv(x, width, 3, 1, 1).relu();
    let h = ps.conv(&h, 2 * width, 4, 2, 1).relu();
    let h = ps.conv(&h, 2 * width, 3, 1, 1).relu();
    let h = ps.conv(&h, 2 * width, 3, 1, 1).relu();
    let h = up_conv(ps, &h, width).relu();
    ps.conv_head(&h, out, 3, 1)
}

/// Encoder/decoder with a skip connection at every scale.
fn unet(ps: &mut ParamScope, x: &Var, width: usize, depth: usize, out: usize) -> Var {
    let channels = |level: usize| (width << level).min(8 * width);
    let mut skips = Vec::with_capacity(depth);
    let mut h = ps.conv(x, channels(0), 3, 1, 1).leaky_relu(CRITIC_SLOPE);
    for level in 1..=depth {
        skips.push(h.clone());
        let d = ps.conv(&h, channels(level), 4, 2, 1);
        h = ps.instance_norm(&d).leaky_relu(CRITIC_SLOPE);
    }
    for level in (1..=depth).rev() {
        let u = up_conv(ps, &h, channels(level - 1));
        let u = ps.instance_norm(&u).relu();
        let skip = &skips[level - 1];
        h = Var::concat(&[u, skip.clone()], 1);
        if level > 1 {
            let c = channels(level - 1);
            let m = ps.conv(&h, c, 3, 1, 1);
            h = ps.instance_norm(&m).relu();
        }
    }
    ps.conv_head(&h, out, 3, 1)
}

/// Levels of downsampling for the UNet tags at a working resolution. The
/// 128 variant stops at a 4×4 bottleneck, the 256 variant one level deeper.
pub fn unet_depth(name: ArchName, resolution: usize) -> usize {
    let log = resolution.trailing_zeros() as usize;
    match name {
        ArchName::UNet128 => log.saturating_sub(2).max(1),
        ArchName::UNet256 => log.saturating_sub(1).max(1),
        _ => 0,
    }
}

pub fn residual_blocks(name: ArchName) -> usize {
    match name {
        ArchName::Res6 => 6,
        ArchName::Res9 => 9,
        _ => 0,
    }
}

/// Generator body for any non-critic architecture.
pub fn generator(
    ps: &mut ParamScope,
    name: ArchName,
    x: &Var,
    width: usize,
    out: usize,
) -> Var {
    let resolution = x.shape()[2];
    match name {
        ArchName::Res6 | ArchName::Res9 => resnet(ps, x, width, residual_blocks(name), out),
        ArchName::CNet => cnet(ps, x, width, out),
        ArchName::UNet128 | ArchName::UNet256 => {
            unet(ps, x, width, unet_depth(name, resolution), out)
        }
        ArchName::Critic => unreachable!("critic is not a generator"),
    }
}

/// Seven convolutions followed by one dense layer producing `heads` outputs.
pub fn critic(ps: &mut ParamScope, x: &Var, width: usize, heads: usize) -> Var {
    let lrelu = |v: Var| v.leaky_relu(CRITIC_SLOPE);
    let mut h = lrelu(ps.conv(x, width, 3, 1, 1));
    let mut c = width;
    for _ in 0..3 {
        c *= 2;
        h = lrelu(ps.conv(&h, c, 4, 2, 1));
        h = lrelu(ps.conv(&h, c, 3, 1, 1));
    }
    let s = h.shape().to_vec();
    let flat = h.reshape(&[s[0], s[1] * s[2] * s[3]]);
    ps.linear(&flat, heads)
}
