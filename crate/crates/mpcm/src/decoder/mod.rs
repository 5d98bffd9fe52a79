//! Multi-scale Mamba decoding: fusion ladder, the multi-scale selective
//! scan block, and the full segmentation network.

pub mod scan;

pub use scan::{scan_recurrence, selective_scan_1d, Scan2d, ScanParams, DEFAULT_STATE_DIM};

use crate::elem::Elem;
use crate::encoder::{split_point, Encoder, EncoderFeatures, SPLIT_RATIO};
use crate::error::{Result, TensorError};
use crate::nn::{
    bilinear_resize, channel_max, channel_mean, gap, pixel_unshuffle, BatchNorm, Conv2d, ConvSpec,
    LayerNorm, Linear, ModelParams, ParamCtx,
};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

// ---------------------------------------------------------------------------
// UP fusion ladder
// ---------------------------------------------------------------------------

/// One decoder rung: two 3x3 conv layers (conv + BN + ReLU) on the
/// coarser feature, bilinear x2, a 1x1 projection to the skip width,
/// then concat + 1x1 fusion.
#[derive(Clone, Debug)]
pub struct UpFuse {
    pub in_ch: usize,
    pub skip_ch: usize,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub proj: Conv2d,
    pub fuse: Conv2d,
}

impl UpFuse {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        in_ch: usize,
        skip_ch: usize,
    ) -> Self {
        UpFuse {
            in_ch,
            skip_ch,
            conv1: Conv2d::new(params, &format!("{name}.conv1"), ConvSpec::same(in_ch, in_ch, 3)),
            bn1: BatchNorm::new(params, &format!("{name}.bn1"), in_ch),
            conv2: Conv2d::new(params, &format!("{name}.conv2"), ConvSpec::same(in_ch, in_ch, 3)),
            bn2: BatchNorm::new(params, &format!("{name}.bn2"), in_ch),
            proj: Conv2d::new(params, &format!("{name}.proj"), ConvSpec::same(in_ch, skip_ch, 1)),
            fuse: Conv2d::new(
                params,
                &format!("{name}.fuse"),
                ConvSpec::same(2 * skip_ch, skip_ch, 1),
            ),
        }
    }

    pub fn forward<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        u_next: &Tensor<E>,
        f_skip: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        let h = self.bn1.forward(ctx, &self.conv1.forward(ctx, u_next)?)?.relu();
        let h = self.bn2.forward(ctx, &self.conv2.forward(ctx, &h)?)?.relu();
        let h = bilinear_resize(&h, 2.0)?;
        if h.shape()[2] != f_skip.shape()[2] || h.shape()[3] != f_skip.shape()[3] {
            return Err(TensorError::invalid(
                "up_fuse",
                format!(
                    "upsampled extent {:?} does not match skip {:?}",
                    &h.shape()[2..],
                    &f_skip.shape()[2..]
                ),
            ));
        }
        let h = self.proj.forward(ctx, &h)?;
        let cat = Tensor::concat(&[&h, f_skip], 1)?;
        self.fuse.forward(ctx, &cat)
    }
}

// ---------------------------------------------------------------------------
// hybrid attention (channel statistics gate + spatial gate)
// ---------------------------------------------------------------------------

/// Intermediates of one hybrid-attention pass.
pub struct HaParts<E: Elem> {
    /// hard-sigmoid channel gates, B x C, in [0,1]
    pub channel_gate: Tensor<E>,
    /// input scaled by the channel gates
    pub channel_out: Tensor<E>,
    /// hard-sigmoid spatial gate, B x 1 x H x W, in [0,1]
    pub spatial_gate: Tensor<E>,
    pub out: Tensor<E>,
}

/// Channel recalibration from per-channel mean and standard deviation
/// (each channel is summarized as a Gaussian), followed by a 7x7 spatial
/// gate over the channel-collapsed [avg, max] maps. Both gates use
/// hard-sigmoid. No statistic is ever divided by, so constant inputs
/// (zero deviation) stay finite.
#[derive(Clone, Debug)]
pub struct HybridAttention {
    pub channels: usize,
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
}

impl HybridAttention {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, name: &str, channels: usize) -> Self {
        let mid = (channels / 4).max(4);
        HybridAttention {
            channels,
            fc1: Linear::new(params, &format!("{name}.fc1"), 2 * channels, mid),
            fc2: Linear::new_zeroed(params, &format!("{name}.fc2"), mid, channels),
            spatial: Conv2d::new_zeroed(params, &format!("{name}.spatial"), ConvSpec::same(2, 1, 7)),
        }
    }

    pub fn forward_detailed<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        x: &Tensor<E>,
    ) -> Result<HaParts<E>> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(TensorError::invalid(
                "hybrid_attention",
                format!("expected B x {} x H x W, got {:?}", self.channels, x.shape()),
            ));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let mean = gap(x)?.reshape(vec![b, c])?;
        let std = x.std_axes(&[2, 3], false)?;
        let desc = Tensor::concat(&[&mean, &std], 1)?;
        let gate = self
            .fc2
            .forward(ctx, &self.fc1.forward(ctx, &desc)?.relu())?
            .hard_sigmoid();
        let channel_out = x.mul(&gate.reshape(vec![b, c, 1, 1])?)?;

        let smap = Tensor::concat(&[&channel_mean(&channel_out)?, &channel_max(&channel_out)?], 1)?;
        let spatial_gate = self.spatial.forward(ctx, &smap)?.hard_sigmoid();
        let out = channel_out.mul(&spatial_gate)?;
        Ok(HaParts {
            channel_gate: gate,
            channel_out,
            spatial_gate,
            out,
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.forward_detailed(ctx, x)?.out)
    }
}

// ---------------------------------------------------------------------------
// SSHD: spatial-semantic hybrid domain
// ---------------------------------------------------------------------------

/// Channel-split block pairing a selective-scan branch (the large part:
/// 1x1, depthwise 3x3, four-direction scan, layer norm) with a
/// hybrid-attention branch (the small part), fused by concat + 1x1.
#[derive(Clone, Debug)]
pub struct Sshd {
    pub channels: usize,
    pub lin_in: Conv2d,
    pub dw: Conv2d,
    pub scan: Scan2d,
    pub ln: LayerNorm,
    pub ha: HybridAttention,
    pub fuse: Conv2d,
}

impl Sshd {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        channels: usize,
        state_dim: usize,
        scan_per_direction: bool,
    ) -> Result<Self> {
        if channels < 8 {
            return Err(TensorError::invalid(
                "sshd",
                format!("needs at least 8 channels to split, got {channels}"),
            ));
        }
        let c_r = split_point(channels);
        let c_large = channels - c_r;
        Ok(Sshd {
            channels,
            lin_in: Conv2d::new(params, &format!("{name}.lin_in"), ConvSpec::same(c_large, c_large, 1)),
            dw: Conv2d::new(
                params,
                &format!("{name}.dw"),
                ConvSpec::same(c_large, c_large, 3).depthwise(),
            ),
            scan: Scan2d::new(params, &format!("{name}.scan"), c_large, state_dim, scan_per_direction),
            ln: LayerNorm::new(params, &format!("{name}.ln"), c_large),
            ha: HybridAttention::new(params, &format!("{name}.ha"), c_r),
            fuse: Conv2d::new(params, &format!("{name}.fuse"), ConvSpec::same(channels, channels, 1)),
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.rank() != 4 || x.shape()[1] != self.channels {
            return Err(TensorError::invalid(
                "sshd",
                format!("expected B x {} x H x W, got {:?}", self.channels, x.shape()),
            ));
        }
        let (small, large) = x.split_ratio(1, SPLIT_RATIO)?;
        let x1 = {
            let h = self.lin_in.forward(ctx, &large)?;
            let h = self.dw.forward(ctx, &h)?;
            let h = self.scan.forward(ctx, &h)?;
            self.ln.forward(ctx, &h)?
        };
        let x2 = self.ha.forward(ctx, &small)?;
        let cat = Tensor::concat(&[&x1, &x2], 1)?;
        self.fuse.forward(ctx, &cat)
    }
}

// ---------------------------------------------------------------------------
// M2B: multi-scale Mamba block
// ---------------------------------------------------------------------------

/// Three receptive-field branches brought to a common extent of
/// `extent(f_d)/4` and channel width `channels(f_d)`:
/// A) pixel-unshuffle by 4; B) 3x3 stride-2 conv then pixel-unshuffle
/// by 2; C) 5x5 stride-4 conv. Concatenated, refined by SSHD, upsampled
/// back and reduced to the input width.
#[derive(Clone, Debug)]
pub struct M2b {
    pub channels: usize,
    pub conv_b: Conv2d,
    pub bn_b: BatchNorm,
    pub conv_c: Conv2d,
    pub bn_c: BatchNorm,
    pub proj_a: Conv2d,
    pub proj_b: Conv2d,
    pub proj_c: Conv2d,
    pub sshd: Sshd,
    pub reduce: Conv2d,
}

impl M2b {
    pub fn new<E: Elem>(
        params: &mut ModelParams<E>,
        name: &str,
        channels: usize,
        state_dim: usize,
        scan_per_direction: bool,
    ) -> Result<Self> {
        let c = channels;
        Ok(M2b {
            channels: c,
            conv_b: Conv2d::new(
                params,
                &format!("{name}.conv_b"),
                ConvSpec::same(c, 2 * c, 3).with_stride(2),
            ),
            bn_b: BatchNorm::new(params, &format!("{name}.bn_b"), 2 * c),
            conv_c: Conv2d::new(
                params,
                &format!("{name}.conv_c"),
                ConvSpec::same(c, 4 * c, 5).with_stride(4),
            ),
            bn_c: BatchNorm::new(params, &format!("{name}.bn_c"), 4 * c),
            proj_a: Conv2d::new(params, &format!("{name}.proj_a"), ConvSpec::same(16 * c, c, 1)),
            proj_b: Conv2d::new(params, &format!("{name}.proj_b"), ConvSpec::same(8 * c, c, 1)),
            proj_c: Conv2d::new(params, &format!("{name}.proj_c"), ConvSpec::same(4 * c, c, 1)),
            sshd: Sshd::new(params, &format!("{name}.sshd"), 3 * c, state_dim, scan_per_direction)?,
            reduce: Conv2d::new(params, &format!("{name}.reduce"), ConvSpec::same(3 * c, c, 1)),
        })
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, f_d: &Tensor<E>) -> Result<Tensor<E>> {
        if f_d.rank() != 4 || f_d.shape()[1] != self.channels {
            return Err(TensorError::invalid(
                "m2b",
                format!("expected B x {} x H x W, got {:?}", self.channels, f_d.shape()),
            ));
        }
        let (h, w) = (f_d.shape()[2], f_d.shape()[3]);
        if h % 4 != 0 || w % 4 != 0 {
            return Err(TensorError::invalid(
                "m2b",
                format!("extent {h}x{w} must be divisible by 4"),
            ));
        }
        let a = self.proj_a.forward(ctx, &pixel_unshuffle(f_d, 4)?)?;
        let b_map = self.bn_b.forward(ctx, &self.conv_b.forward(ctx, f_d)?)?.relu();
        let b = self.proj_b.forward(ctx, &pixel_unshuffle(&b_map, 2)?)?;
        let c_map = self.bn_c.forward(ctx, &self.conv_c.forward(ctx, f_d)?)?.relu();
        let c = self.proj_c.forward(ctx, &c_map)?;
        debug_assert_eq!(a.shape()[2..], b.shape()[2..]);
        debug_assert_eq!(a.shape()[2..], c.shape()[2..]);
        let cat = Tensor::concat(&[&a, &b, &c], 1)?;
        let refined = self.sshd.forward(ctx, &cat)?;
        let up = bilinear_resize(&refined, 4.0)?;
        self.reduce.forward(ctx, &up)
    }
}

// ---------------------------------------------------------------------------
// the full network
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct NetConfig {
    /// base channel width of encoder stage 1 (must be >= 8)
    pub c0: usize,
    /// SLA head count in the final encoder stage
    pub heads: usize,
    /// per-channel state dimension of the selective scans
    pub scan_state: usize,
    /// give each scan direction its own parameters
    pub scan_per_direction: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            c0: 8,
            heads: 1,
            scan_state: DEFAULT_STATE_DIM,
            scan_per_direction: false,
        }
    }
}

/// Encoder, fusion ladder, multi-scale Mamba block, and segmentation
/// head producing one logit map per category.
#[derive(Clone, Debug)]
pub struct MpcmNet {
    pub cfg: NetConfig,
    pub encoder: Encoder,
    pub up3: UpFuse,
    pub up2: UpFuse,
    pub up1: UpFuse,
    pub m2b: M2b,
    pub head_conv: Conv2d,
    pub head_bn: BatchNorm,
    pub head_out: Conv2d,
}

impl MpcmNet {
    pub fn new<E: Elem>(params: &mut ModelParams<E>, cfg: NetConfig) -> Result<Self> {
        let c0 = cfg.c0;
        let fd_ch = 14 * c0; // concat of u2 (2 c0), u3 (4 c0), u4 (8 c0)
        Ok(MpcmNet {
            cfg,
            encoder: Encoder::new(params, "encoder", c0, cfg.heads)?,
            up3: UpFuse::new(params, "decoder.up3", 8 * c0, 4 * c0),
            up2: UpFuse::new(params, "decoder.up2", 4 * c0, 2 * c0),
            up1: UpFuse::new(params, "decoder.up1", 2 * c0, c0),
            m2b: M2b::new(params, "decoder.m2b", fd_ch, cfg.scan_state, cfg.scan_per_direction)?,
            head_conv: Conv2d::new(
                params,
                "head.conv",
                ConvSpec::same(fd_ch + c0, c0, 3),
            ),
            head_bn: BatchNorm::new(params, "head.bn", c0),
            head_out: Conv2d::new(params, "head.out", ConvSpec::same(c0, NUM_CLASSES, 1)),
        })
    }

    /// Encoder features plus the fused ladder tensors, for tests.
    pub fn forward_features<E: Elem>(
        &self,
        ctx: &ParamCtx<E>,
        img: &Tensor<E>,
    ) -> Result<(EncoderFeatures<E>, Tensor<E>, Tensor<E>, Tensor<E>)> {
        let f = self.encoder.forward(ctx, img)?;
        let u3 = self.up3.forward(ctx, &f.f4, &f.f3)?;
        let u2 = self.up2.forward(ctx, &u3, &f.f2)?;
        let u1 = self.up1.forward(ctx, &u2, &f.f1)?;
        Ok((f, u3, u2, u1))
    }

    pub fn forward<E: Elem>(&self, ctx: &ParamCtx<E>, img: &Tensor<E>) -> Result<Tensor<E>> {
        let (f, u3, u2, u1) = self.forward_features(ctx, img)?;
        let f_d = Tensor::concat(
            &[&u2, &bilinear_resize(&u3, 2.0)?, &bilinear_resize(&f.f4, 4.0)?],
            1,
        )?;
        let f_s = self.m2b.forward(ctx, &f_d)?;
        let h = Tensor::concat(&[&bilinear_resize(&f_s, 2.0)?, &u1], 1)?;
        let h = self.head_bn.forward(ctx, &self.head_conv.forward(ctx, &h)?)?.relu();
        let h = bilinear_resize(&h, 2.0)?;
        self.head_out.forward(ctx, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::BlockCheck;
    use crate::rng::Rng;

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    // -- up_fuse -------------------------------------------------------------

    #[test]
    fn up_fuse_shape_contract() {
        let mut params = ModelParams::<f64>::new(1);
        let up = UpFuse::new(&mut params, "u", 128, 64);
        let u4 = Tensor::<f64>::zeros(vec![1, 128, 4, 4]);
        let f3 = Tensor::<f64>::zeros(vec![1, 64, 8, 8]);
        let ctx = ParamCtx::eval(&params);
        let u3 = up.forward(&ctx, &u4, &f3).unwrap();
        assert_eq!(u3.shape(), &[1, 64, 8, 8]);
    }

    #[test]
    fn up_fuse_misaligned_extents_error() {
        let mut params = ModelParams::<f64>::new(2);
        let up = UpFuse::new(&mut params, "u", 8, 4);
        let u = Tensor::<f64>::zeros(vec![1, 8, 4, 4]);
        let skip = Tensor::<f64>::zeros(vec![1, 4, 10, 10]);
        let ctx = ParamCtx::eval(&params);
        assert!(up.forward(&ctx, &u, &skip).is_err());
    }

    #[test]
    fn up_fuse_zero_skip_depends_only_on_upsampled_path() {
        let mut params = ModelParams::<f64>::new(3);
        let up = UpFuse::new(&mut params, "u", 8, 4);
        let mut rng = Rng::new(5);
        let u = Tensor::rand_uniform(&mut rng, vec![1, 8, 4, 4], -1.0, 1.0);
        let zero_skip = Tensor::<f64>::zeros(vec![1, 4, 8, 8]);
        let ctx = ParamCtx::eval(&params);
        let y1 = up.forward(&ctx, &u, &zero_skip).unwrap();
        // zero the fusion weights that read the skip half; a random skip
        // must then produce the same output (linearity in the skip)
        let w = params.get(up.fuse.w);
        let masked = Tensor::from_fn(w.shape().to_vec(), |i| {
            let ic = (i / 1) % 8; // 1x1 kernel: index = oc*8 + ic
            if ic >= 4 {
                0.0
            } else {
                w.data()[i]
            }
        });
        params.set(up.fuse.w, masked);
        let skip = Tensor::rand_uniform(&mut rng, vec![1, 4, 8, 8], -1.0, 1.0);
        let y2 = up.forward(&ctx, &u, &skip).unwrap();
        let y1b = up.forward(&ctx, &u, &zero_skip).unwrap();
        assert!(max_abs_diff(&y2, &y1b) < 1e-12);
        let _ = y1;
    }

    #[test]
    fn up_fuse_gradcheck() {
        let mut params = ModelParams::<f64>::new(7);
        let up = UpFuse::new(&mut params, "u", 6, 4);
        let mut rng = Rng::new(9);
        let u = Tensor::rand_uniform(&mut rng, vec![2, 6, 3, 3], -1.0, 1.0);
        let skip = Tensor::rand_uniform(&mut rng, vec![2, 4, 6, 6], -1.0, 1.0);
        let r = BlockCheck::new("up_fuse")
            .sample(20)
            .run(&params, &u, |ctx, t| up.forward(ctx, t, &skip));
        assert!(r.pass, "{}", r.line());
    }

    // -- hybrid attention ------------------------------------------------------

    #[test]
    fn ha_zeroed_bottleneck_halves_channels() {
        let mut params = ModelParams::<f64>::new(11);
        let ha = HybridAttention::new(&mut params, "h", 8);
        params.zero(ha.fc2.w);
        params.zero(ha.fc2.b);
        let mut rng = Rng::new(13);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 8, 7, 7], -1.0, 1.0);
        let ctx = ParamCtx::eval(&params);
        let parts = ha.forward_detailed(&ctx, &x).unwrap();
        for &g in parts.channel_gate.data() {
            assert_eq!(g, 0.5, "hard_sigmoid(0)");
        }
        assert!(max_abs_diff(&parts.channel_out, &x.scale(0.5)) < 1e-15);
    }

    #[test]
    fn ha_constant_input_stays_finite() {
        let mut params = ModelParams::<f64>::new(17);
        let ha = HybridAttention::new(&mut params, "h", 8);
        let x = Tensor::<f64>::full(vec![2, 8, 8, 8], 1.3);
        let ctx = ParamCtx::eval(&params);
        let y = ha.forward(&ctx, &x).unwrap();
        for &v in y.data() {
            assert!(v.is_finite(), "zero deviation must not divide");
        }
    }

    #[test]
    fn ha_gates_live_in_unit_interval() {
        let mut params = ModelParams::<f64>::new(19);
        let ha = HybridAttention::new(&mut params, "h", 8);
        let mut rng = Rng::new(23);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 8, 7, 9], -5.0, 5.0);
        let ctx = ParamCtx::eval(&params);
        let parts = ha.forward_detailed(&ctx, &x).unwrap();
        for &v in parts.channel_gate.data().iter().chain(parts.spatial_gate.data()) {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    /// Formula transcription with loops: channel stats -> bottleneck ->
    /// hard-sigmoid gates -> spatial [avg, max] -> 7x7 -> hard-sigmoid.
    #[test]
    fn ha_matches_formula_transcription_oracle() {
        use crate::oracles::direct_conv_oracle;
        let mut params = ModelParams::<f64>::new(29);
        let ha = HybridAttention::new(&mut params, "h", 8);
        let mut rng = Rng::new(31);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 8, 7, 7], -1.0, 1.0);
        let ctx = ParamCtx::eval(&params);
        let got = ha.forward(&ctx, &x).unwrap();

        let hs = |v: f64| (v / 6.0 + 0.5).clamp(0.0, 1.0);
        let (b, c, h, w) = (2, 8, 7, 7);
        let n = (h * w) as f64;
        let mid = 4.max(c / 4);
        let fc1w = params.get(ha.fc1.w);
        let fc1b = params.get(ha.fc1.b);
        let fc2w = params.get(ha.fc2.w);
        let fc2b = params.get(ha.fc2.b);
        let mut x1 = vec![0.0; b * c * h * w];
        for bi in 0..b {
            // per-channel mean and population std
            let mut desc = vec![0.0; 2 * c];
            for ci in 0..c {
                let mut mu = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        mu += x.at(&[bi, ci, i, j]);
                    }
                }
                mu /= n;
                let mut var = 0.0;
                for i in 0..h {
                    for j in 0..w {
                        let d = x.at(&[bi, ci, i, j]) - mu;
                        var += d * d;
                    }
                }
                desc[ci] = mu;
                desc[c + ci] = (var / n).sqrt();
            }
            // two-layer bottleneck with relu, then hard-sigmoid gates
            let mut hid = vec![0.0; mid];
            for m in 0..mid {
                let mut acc = fc1b.at(&[m]);
                for (t, &dv) in desc.iter().enumerate() {
                    acc += fc1w.at(&[t, m]) * dv;
                }
                hid[m] = acc.max(0.0);
            }
            for ci in 0..c {
                let mut acc = fc2b.at(&[ci]);
                for (m, &hv) in hid.iter().enumerate() {
                    acc += fc2w.at(&[m, ci]) * hv;
                }
                let gate = hs(acc);
                for i in 0..h {
                    for j in 0..w {
                        x1[((bi * c + ci) * h + i) * w + j] = x.at(&[bi, ci, i, j]) * gate;
                    }
                }
            }
        }
        let x1 = Tensor::from_vec(vec![b, c, h, w], x1).unwrap();
        // spatial gate over [avg, max] channel collapses
        let mut smap = vec![0.0; b * 2 * h * w];
        for bi in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let mut mean = 0.0;
                    let mut mx = f64::NEG_INFINITY;
                    for ci in 0..c {
                        let v = x1.at(&[bi, ci, i, j]);
                        mean += v;
                        mx = mx.max(v);
                    }
                    smap[((bi * 2) * h + i) * w + j] = mean / c as f64;
                    smap[((bi * 2 + 1) * h + i) * w + j] = mx;
                }
            }
        }
        let smap = Tensor::from_vec(vec![b, 2, h, w], smap).unwrap();
        let pre = direct_conv_oracle(
            &smap,
            &params.get(ha.spatial.w),
            &params.get(ha.spatial.b),
            &ha.spatial.spec,
        );
        let mut want = vec![0.0; b * c * h * w];
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        want[((bi * c + ci) * h + i) * w + j] =
                            x1.at(&[bi, ci, i, j]) * hs(pre.at(&[bi, 0, i, j]));
                    }
                }
            }
        }
        let want = Tensor::from_vec(vec![b, c, h, w], want).unwrap();
        assert!(max_abs_diff(&got, &want) < 1e-10);
    }

    #[test]
    fn ha_gradcheck() {
        let mut params = ModelParams::<f64>::new(37);
        let ha = HybridAttention::new(&mut params, "h", 8);
        let mut rng = Rng::new(41);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 8, 7, 7], -1.0, 1.0);
        let r = BlockCheck::new("hybrid_attention")
            .sample(30)
            .run(&params, &x, |ctx, t| ha.forward(ctx, t));
        assert!(r.pass, "{}", r.line());
    }

    // -- SSHD ------------------------------------------------------------------

    #[test]
    fn sshd_zeroed_scan_projections_leave_skip_path() {
        let mut params = ModelParams::<f64>::new(43);
        let sshd = Sshd::new(&mut params, "s", 8, 2, false).unwrap();
        let sp = &sshd.scan.sets[0];
        params.zero(sp.w_b);
        params.zero(sp.w_c);
        let mut rng = Rng::new(47);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 8, 8, 8], -1.0, 1.0);
        let ctx = ParamCtx::eval(&params);
        let got = sshd.forward(&ctx, &x).unwrap();
        // manual reduced path: the scan collapses to 4 * d (.) tokens
        let want = {
            let (small, large) = x.split_ratio(1, SPLIT_RATIO).unwrap();
            let h = sshd.lin_in.forward(&ctx, &large).unwrap();
            let h = sshd.dw.forward(&ctx, &h).unwrap();
            let d = ctx.get(sp.d_skip).reshape(vec![6, 1, 1]).unwrap();
            let h = h.mul(&d).unwrap().scale(4.0);
            let x1 = sshd.ln.forward(&ctx, &h).unwrap();
            let x2 = sshd.ha.forward(&ctx, &small).unwrap();
            let cat = Tensor::concat(&[&x1, &x2], 1).unwrap();
            sshd.fuse.forward(&ctx, &cat).unwrap()
        };
        assert!(max_abs_diff(&got, &want) < 1e-12);
    }

    #[test]
    fn sshd_shape_preserved() {
        let mut params = ModelParams::<f64>::new(53);
        let sshd = Sshd::new(&mut params, "s", 48, 2, false).unwrap();
        let mut rng = Rng::new(59);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 48, 8, 8], -1.0, 1.0);
        let ctx = ParamCtx::eval(&params);
        assert_eq!(sshd.forward(&ctx, &x).unwrap().shape(), x.shape());
    }

    #[test]
    fn sshd_rejects_tiny_channel_counts() {
        let mut params = ModelParams::<f64>::new(61);
        assert!(Sshd::new(&mut params, "s", 7, 2, false).is_err());
    }

    #[test]
    fn sshd_gradcheck() {
        let mut params = ModelParams::<f64>::new(67);
        let sshd = Sshd::new(&mut params, "s", 8, 2, false).unwrap();
        let mut rng = Rng::new(71);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 8, 4, 4], -1.0, 1.0);
        let r = BlockCheck::new("sshd")
            .sample(12)
            .run(&params, &x, |ctx, t| sshd.forward(ctx, t));
        assert!(r.pass, "{}", r.line());
    }

    // -- M2B ---------------------------------------------------------------------

    #[test]
    fn m2b_branch_extents_align() {
        let mut params = ModelParams::<f64>::new(73);
        let m2b = M2b::new(&mut params, "m", 8, 2, false).unwrap();
        let ctx = ParamCtx::eval(&params);
        for (h, w) in [(8, 8), (8, 12), (16, 16)] {
            let x = Tensor::<f64>::zeros(vec![1, 8, h, w]);
            let a = pixel_unshuffle(&x, 4).unwrap();
            let b = pixel_unshuffle(&m2b.conv_b.forward(&ctx, &x).unwrap(), 2).unwrap();
            let c = m2b.conv_c.forward(&ctx, &x).unwrap();
            assert_eq!(a.shape()[2..], b.shape()[2..], "{h}x{w}");
            assert_eq!(a.shape()[2..], c.shape()[2..], "{h}x{w}");
            assert_eq!(a.shape()[2], h / 4);
        }
    }

    #[test]
    fn m2b_preserves_shape() {
        let mut params = ModelParams::<f64>::new(79);
        let m2b = M2b::new(&mut params, "m", 32, 2, false).unwrap();
        let mut rng = Rng::new(83);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 32, 16, 16], -1.0, 1.0);
        let ctx = ParamCtx::eval(&params);
        assert_eq!(m2b.forward(&ctx, &x).unwrap().shape(), x.shape());
    }

    #[test]
    fn m2b_rejects_indivisible_extents() {
        let mut params = ModelParams::<f64>::new(89);
        let m2b = M2b::new(&mut params, "m", 8, 2, false).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 8, 6, 8]);
        let ctx = ParamCtx::eval(&params);
        assert!(m2b.forward(&ctx, &x).is_err());
    }

    #[test]
    fn m2b_gradcheck() {
        let mut params = ModelParams::<f64>::new(97);
        let m2b = M2b::new(&mut params, "m", 8, 2, false).unwrap();
        let mut rng = Rng::new(101);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 8, 8, 8], -1.0, 1.0);
        let r = BlockCheck::new("m2b")
            .sample(6)
            .run(&params, &x, |ctx, t| m2b.forward(ctx, t));
        assert!(r.pass, "{}", r.line());
    }

    // -- full network ---------------------------------------------------------------

    #[test]
    fn network_logits_match_input_extent_with_four_channels() {
        let mut params = ModelParams::<f64>::new(103);
        let net = MpcmNet::new(&mut params, NetConfig { c0: 16, ..Default::default() }).unwrap();
        let img = Tensor::<f64>::zeros(vec![1, 3, 64, 64]);
        let ctx = ParamCtx::eval(&params);
        let logits = net.forward(&ctx, &img).unwrap();
        assert_eq!(logits.shape(), &[1, 4, 64, 64]);
    }

    #[test]
    fn network_is_not_degenerate() {
        let mut params = ModelParams::<f64>::new(107);
        let net = MpcmNet::new(&mut params, NetConfig::default()).unwrap();
        let mut rng = Rng::new(109);
        let a = Tensor::rand_uniform(&mut rng, vec![1, 3, 32, 32], 0.0, 1.0);
        let b = Tensor::rand_uniform(&mut rng, vec![1, 3, 32, 32], 0.0, 1.0);
        let ctx = ParamCtx::eval(&params);
        let la = net.forward(&ctx, &a).unwrap();
        let lb = net.forward(&ctx, &b).unwrap();
        assert!(max_abs_diff(&la, &lb) > 1e-8, "distinct inputs, distinct logits");
    }
}
