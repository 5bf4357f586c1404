//! The conditional denoiser G(x_t, z, t).
//!
//! The generator predicts the clean sample directly from the corrupted one;
//! the random code z drives every adaptive group normalization through a
//! mapping network, which is what lets one (x_t, t) input produce a whole
//! distribution of denoised outputs. Grid inputs run through a small U-net
//! with skip connections; 2-D point data uses a fully-connected variant with
//! the same conditioning structure.

use lddgan_core::graph::{Tape, Var};
use lddgan_core::{CoreError, Element, ParamSet, Result, RngStream, Tensor};

use crate::nn::{
    adaptive_group_norm, conv2d, init_adaptive_group_norm, init_conv2d, init_linear,
    init_time_mlp, linear, time_embed, upsample_nearest_2x, Ctx,
};

/// Input layout the networks operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataShape {
    /// Flat feature vector per sample (the 2-D point benchmark).
    Vector { dim: usize },
    /// Channels-first latent grid per sample.
    Grid {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl DataShape {
    pub fn sample_numel(&self) -> usize {
        match *self {
            DataShape::Vector { dim } => dim,
            DataShape::Grid {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        match *self {
            DataShape::Vector { dim } => vec![n, dim],
            DataShape::Grid {
                channels,
                height,
                width,
            } => vec![n, channels, height, width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub data: DataShape,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_scale: usize,
    pub z_dim: usize,
    pub z_mapping_layers: usize,
    pub z_embed_dim: usize,
    pub time_embed_dim: usize,
    pub groups: usize,
    /// Placeholder: attention stages are not implemented at this scale.
    pub use_attention: bool,
}

impl GeneratorConfig {
    pub fn vector(dim: usize) -> Self {
        GeneratorConfig {
            data: DataShape::Vector { dim },
            base_channels: 128,
            channel_multipliers: vec![1, 2, 2],
            res_blocks_per_scale: 2,
            z_dim: 25,
            z_mapping_layers: 4,
            z_embed_dim: 256,
            time_embed_dim: 128,
            groups: 8,
            use_attention: false,
        }
    }

    pub fn grid(channels: usize, height: usize, width: usize) -> Self {
        GeneratorConfig {
            data: DataShape::Grid {
                channels,
                height,
                width,
            },
            ..GeneratorConfig::vector(0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.z_dim == 0
            || self.z_embed_dim == 0
            || self.z_mapping_layers == 0
            || self.base_channels == 0
            || self.res_blocks_per_scale == 0
        {
            return Err(CoreError::Config(
                "generator dimensions must be positive".into(),
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(CoreError::Config(
                "time embedding dimension must be even and >= 2".into(),
            ));
        }
        if self.use_attention {
            return Err(CoreError::Config(
                "attention stages are not implemented; set use_attention = false".into(),
            ));
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 {
            return Err(CoreError::Config(format!(
                "base_channels {} must be a positive multiple of groups {}",
                self.base_channels, self.groups
            )));
        }
        match self.data {
            DataShape::Vector { dim } => {
                if dim == 0 {
                    return Err(CoreError::Config("vector data dimension is zero".into()));
                }
            }
            DataShape::Grid {
                channels,
                height,
                width,
            } => {
                if channels == 0 || height == 0 || width == 0 {
                    return Err(CoreError::Config("grid extents must be positive".into()));
                }
                if self.channel_multipliers.is_empty() {
                    return Err(CoreError::Config("channel multipliers are empty".into()));
                }
                let down = 1usize << (self.channel_multipliers.len() - 1);
                if height % down != 0 || width % down != 0 {
                    return Err(CoreError::Config(format!(
                        "latent {height}x{width} not divisible by the {down}x down path"
                    )));
                }
            }
        }
        Ok(())
    }

    fn scale_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }
}

fn init_conditioning<E: Element>(ps: &mut ParamSet<E>, rng: &mut RngStream, cfg: &GeneratorConfig) {
    init_time_mlp(ps, rng, "g.time", cfg.time_embed_dim);
    let mut d = cfg.z_dim;
    for i in 0..cfg.z_mapping_layers {
        init_linear(ps, rng, &format!("g.zmap{i}"), d, cfg.z_embed_dim, 1.0);
        d = cfg.z_embed_dim;
    }
}

fn map_latent<E: Element>(ctx: &Ctx<'_, E>, cfg: &GeneratorConfig, z: &Var<E>) -> Var<E> {
    let mut h = z.clone();
    for i in 0..cfg.z_mapping_layers {
        h = linear(ctx, &format!("g.zmap{i}"), &h).leaky_relu(0.2);
    }
    h
}

fn init_res_fc<E: Element>(
    ps: &mut ParamSet<E>,
    rng: &mut RngStream,
    name: &str,
    width: usize,
    cfg: &GeneratorConfig,
) {
    init_adaptive_group_norm(ps, rng, &format!("{name}.agn1"), cfg.z_embed_dim, width);
    init_linear(ps, rng, &format!("{name}.fc1"), width, width, 1.0);
    init_linear(ps, rng, &format!("{name}.tproj"), cfg.time_embed_dim, width, 1.0);
    init_adaptive_group_norm(ps, rng, &format!("{name}.agn2"), cfg.z_embed_dim, width);
    init_linear(ps, rng, &format!("{name}.fc2"), width, width, 0.0);
}

fn res_fc<E: Element>(
    ctx: &Ctx<'_, E>,
    name: &str,
    h: &Var<E>,
    z_embed: &Var<E>,
    t_embed: &Var<E>,
    groups: usize,
) -> Var<E> {
    let a = adaptive_group_norm(ctx, &format!("{name}.agn1"), h, z_embed, groups).swish();
    let a = linear(ctx, &format!("{name}.fc1"), &a).add(&linear(
        ctx,
        &format!("{name}.tproj"),
        t_embed,
    ));
    let a = adaptive_group_norm(ctx, &format!("{name}.agn2"), &a, z_embed, groups).swish();
    let a = linear(ctx, &format!("{name}.fc2"), &a);
    h.add(&a)
}

fn init_res_conv<E: Element>(
    ps: &mut ParamSet<E>,
    rng: &mut RngStream,
    name: &str,
    c_in: usize,
    c_out: usize,
    cfg: &GeneratorConfig,
) {
    init_adaptive_group_norm(ps, rng, &format!("{name}.agn1"), cfg.z_embed_dim, c_in);
    init_conv2d(ps, rng, &format!("{name}.c1"), c_in, c_out, 3, 1.0);
    init_linear(ps, rng, &format!("{name}.tproj"), cfg.time_embed_dim, c_out, 1.0);
    init_adaptive_group_norm(ps, rng, &format!("{name}.agn2"), cfg.z_embed_dim, c_out);
    init_conv2d(ps, rng, &format!("{name}.c2"), c_out, c_out, 3, 0.0);
    if c_in != c_out {
        init_conv2d(ps, rng, &format!("{name}.skip"), c_in, c_out, 1, 1.0);
    }
}

fn res_conv<E: Element>(
    ctx: &Ctx<'_, E>,
    name: &str,
    h: &Var<E>,
    z_embed: &Var<E>,
    t_embed: &Var<E>,
    c_out: usize,
    groups: usize,
) -> Var<E> {
    let c_in = h.shape()[1];
    let n = h.shape()[0];
    let a = adaptive_group_norm(ctx, &format!("{name}.agn1"), h, z_embed, groups).swish();
    let a = conv2d(ctx, &format!("{name}.c1"), &a, 1, 1);
    let t = linear(ctx, &format!("{name}.tproj"), t_embed).reshape(&[n, c_out, 1, 1]);
    let a = a.add(&t);
    let a = adaptive_group_norm(ctx, &format!("{name}.agn2"), &a, z_embed, groups).swish();
    let a = conv2d(ctx, &format!("{name}.c2"), &a, 1, 1);
    let skip = if c_in != c_out {
        conv2d(ctx, &format!("{name}.skip"), h, 1, 0)
    } else {
        h.clone()
    };
    skip.add(&a)
}

/// Allocate and initialize all generator parameters.
pub fn init_generator<E: Element>(
    cfg: &GeneratorConfig,
    rng: &mut RngStream,
) -> Result<ParamSet<E>> {
    cfg.validate()?;
    let mut ps = ParamSet::new();
    init_conditioning(&mut ps, rng, cfg);
    match cfg.data {
        DataShape::Vector { dim } => {
            let w = cfg.base_channels;
            init_linear(&mut ps, rng, "g.in", dim, w, 1.0);
            for k in 0..cfg.res_blocks_per_scale {
                init_res_fc(&mut ps, rng, &format!("g.blk{k}"), w, cfg);
            }
            init_adaptive_group_norm(&mut ps, rng, "g.agn_out", cfg.z_embed_dim, w);
            init_linear(&mut ps, rng, "g.out", w, dim, 0.0);
        }
        DataShape::Grid { channels, .. } => {
            let chs = cfg.scale_channels();
            let scales = chs.len();
            let r = cfg.res_blocks_per_scale;
            init_conv2d(&mut ps, rng, "g.in", channels, chs[0], 3, 1.0);
            let mut ch = chs[0];
            let mut skips = vec![chs[0]];
            for s in 0..scales {
                for k in 0..r {
                    init_res_conv(&mut ps, rng, &format!("g.down{s}.{k}"), ch, chs[s], cfg);
                    ch = chs[s];
                    skips.push(ch);
                }
                if s < scales - 1 {
                    init_conv2d(&mut ps, rng, &format!("g.down{s}.ds"), ch, ch, 3, 1.0);
                    skips.push(ch);
                }
            }
            init_res_conv(&mut ps, rng, "g.mid0", ch, ch, ch, cfg);
            init_res_conv(&mut ps, rng, "g.mid1", ch, ch, ch, cfg);
            for s in (0..scales).rev() {
                for k in 0..=r {
                    let skip_ch = skips.pop().expect("skip bookkeeping");
                    init_res_conv(
                        &mut ps,
                        rng,
                        &format!("g.up{s}.{k}"),
                        ch + skip_ch,
                        chs[s],
                        cfg,
                    );
                    ch = chs[s];
                }
                if s > 0 {
                    init_conv2d(&mut ps, rng, &format!("g.up{s}.us"), ch, ch, 3, 1.0);
                }
            }
            assert!(skips.is_empty(), "skip bookkeeping mismatch");
            init_adaptive_group_norm(&mut ps, rng, "g.agn_out", cfg.z_embed_dim, ch);
            init_conv2d(&mut ps, rng, "g.out", ch, channels, 3, 0.0);
        }
    }
    Ok(ps)
}

/// Predict the clean sample for each row of `x_t` under per-row timesteps.
pub fn generator_forward<E: Element>(
    ctx: &Ctx<'_, E>,
    cfg: &GeneratorConfig,
    x_t: &Var<E>,
    z: &Var<E>,
    ts: &[usize],
) -> Var<E> {
    let n = x_t.shape()[0];
    assert_eq!(
        x_t.shape(),
        cfg.data.batch_shape(n),
        "generator input shape"
    );
    assert_eq!(z.shape(), &[n, cfg.z_dim], "latent code shape");
    assert_eq!(ts.len(), n, "one timestep per row");
    let t_embed = time_embed(ctx, "g.time", ts, cfg.time_embed_dim);
    let z_embed = map_latent(ctx, cfg, z);
    let groups = cfg.groups;

    match cfg.data {
        DataShape::Vector { .. } => {
            let mut h = linear(ctx, "g.in", x_t);
            for k in 0..cfg.res_blocks_per_scale {
                h = res_fc(ctx, &format!("g.blk{k}"), &h, &z_embed, &t_embed, groups);
            }
            let h = adaptive_group_norm(ctx, "g.agn_out", &h, &z_embed, groups).swish();
            linear(ctx, "g.out", &h)
        }
        DataShape::Grid { .. } => {
            let chs = cfg.scale_channels();
            let scales = chs.len();
            let r = cfg.res_blocks_per_scale;
            let mut h = conv2d(ctx, "g.in", x_t, 1, 1);
            let mut skips = vec![h.clone()];
            for s in 0..scales {
                for k in 0..r {
                    h = res_conv(
                        ctx,
                        &format!("g.down{s}.{k}"),
                        &h,
                        &z_embed,
                        &t_embed,
                        chs[s],
                        groups,
                    );
                    skips.push(h.clone());
                }
                if s < scales - 1 {
                    h = conv2d(ctx, &format!("g.down{s}.ds"), &h, 2, 1);
                    skips.push(h.clone());
                }
            }
            h = res_conv(ctx, "g.mid0", &h, &z_embed, &t_embed, h.shape()[1], groups);
            h = res_conv(ctx, "g.mid1", &h, &z_embed, &t_embed, h.shape()[1], groups);
            for s in (0..scales).rev() {
                for k in 0..=r {
                    let skip = skips.pop().expect("skip bookkeeping");
                    let joined = ctx.tape().concat(&[&h, &skip], 1);
                    h = res_conv(
                        ctx,
                        &format!("g.up{s}.{k}"),
                        &joined,
                        &z_embed,
                        &t_embed,
                        chs[s],
                        groups,
                    );
                }
                if s > 0 {
                    h = upsample_nearest_2x(&h);
                    h = conv2d(ctx, &format!("g.up{s}.us"), &h, 1, 1);
                }
            }
            assert!(skips.is_empty(), "skip bookkeeping mismatch");
            let h = adaptive_group_norm(ctx, "g.agn_out", &h, &z_embed, groups).swish();
            conv2d(ctx, "g.out", &h, 1, 1)
        }
    }
}

/// Plain-tensor forward with frozen parameters (sampling path).
pub fn generator_forward_tensors<E: Element>(
    cfg: &GeneratorConfig,
    params: &ParamSet<E>,
    x_t: &Tensor<E>,
    z: &Tensor<E>,
    ts: &[usize],
) -> Result<Tensor<E>> {
    let n = ts.len();
    if x_t.shape() != cfg.data.batch_shape(n).as_slice() {
        return Err(CoreError::ShapeMismatch {
            context: "generator input".into(),
            left: x_t.shape().to_vec(),
            right: cfg.data.batch_shape(n),
        });
    }
    if z.shape() != [n, cfg.z_dim] {
        return Err(CoreError::ShapeMismatch {
            context: "generator latent code".into(),
            left: z.shape().to_vec(),
            right: vec![n, cfg.z_dim],
        });
    }
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, params, false);
    let x = tape.constant(x_t.clone());
    let zv = tape.constant(z.clone());
    let out = generator_forward(&ctx, cfg, &x, &zv, ts);
    Ok(out.tensor())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vector_cfg() -> GeneratorConfig {
        GeneratorConfig {
            base_channels: 16,
            channel_multipliers: vec![1],
            res_blocks_per_scale: 2,
            z_dim: 4,
            z_mapping_layers: 2,
            z_embed_dim: 8,
            time_embed_dim: 8,
            groups: 4,
            ..GeneratorConfig::vector(2)
        }
    }

    fn tiny_grid_cfg() -> GeneratorConfig {
        GeneratorConfig {
            data: DataShape::Grid {
                channels: 2,
                height: 8,
                width: 8,
            },
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            res_blocks_per_scale: 1,
            z_dim: 4,
            z_mapping_layers: 2,
            z_embed_dim: 8,
            time_embed_dim: 8,
            groups: 4,
            use_attention: false,
        }
    }

    #[test]
    fn vector_forward_preserves_shape_and_is_deterministic() {
        let cfg = tiny_vector_cfg();
        let mut rng = RngStream::new(1);
        let params = init_generator::<f64>(&cfg, &mut rng).unwrap();
        let x = rng.gaussian::<f64>(&[3, 2]).unwrap();
        let z = rng.gaussian::<f64>(&[3, 4]).unwrap();
        let a = generator_forward_tensors(&cfg, &params, &x, &z, &[1, 2, 4]).unwrap();
        let b = generator_forward_tensors(&cfg, &params, &x, &z, &[1, 2, 4]).unwrap();
        assert_eq!(a.shape(), &[3, 2]);
        assert_eq!(a, b);
    }

    #[test]
    fn grid_forward_preserves_latent_shape() {
        let cfg = tiny_grid_cfg();
        let mut rng = RngStream::new(2);
        let params = init_generator::<f64>(&cfg, &mut rng).unwrap();
        let x = rng.gaussian::<f64>(&[2, 2, 8, 8]).unwrap();
        let z = rng.gaussian::<f64>(&[2, 4]).unwrap();
        let out = generator_forward_tensors(&cfg, &params, &x, &z, &[3, 1]).unwrap();
        assert_eq!(out.shape(), &[2, 2, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn forward_consumes_every_parameter() {
        for cfg in [tiny_vector_cfg(), tiny_grid_cfg()] {
            let mut rng = RngStream::new(3);
            let params = init_generator::<f64>(&cfg, &mut rng).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &params, false);
            let n = 2;
            let x = tape.constant(Tensor::zeros(&cfg.data.batch_shape(n)));
            let z = tape.constant(Tensor::zeros(&[n, cfg.z_dim]));
            let _ = generator_forward(&ctx, &cfg, &x, &z, &[1, 2]);
            assert!(
                ctx.unused_params().is_empty(),
                "unused: {:?}",
                ctx.unused_params()
            );
        }
    }

    #[test]
    fn different_codes_give_different_outputs() {
        let cfg = tiny_vector_cfg();
        let mut rng = RngStream::new(4);
        let params = init_generator::<f64>(&cfg, &mut rng).unwrap();
        let x = rng.gaussian::<f64>(&[1, 2]).unwrap();
        let mut total = 0.0;
        for _ in 0..100 {
            let z1 = rng.gaussian::<f64>(&[1, 4]).unwrap();
            let z2 = rng.gaussian::<f64>(&[1, 4]).unwrap();
            let a = generator_forward_tensors(&cfg, &params, &x, &z1, &[2]).unwrap();
            let b = generator_forward_tensors(&cfg, &params, &x, &z2, &[2]).unwrap();
            let d: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            total += d.sqrt();
        }
        assert!(total / 100.0 > 0.0, "mean L2 over z pairs must be positive");
    }

    #[test]
    fn attention_flag_is_rejected() {
        let cfg = GeneratorConfig {
            use_attention: true,
            ..tiny_vector_cfg()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        let cfg = GeneratorConfig {
            data: DataShape::Grid {
                channels: 2,
                height: 6,
                width: 6,
            },
            ..tiny_grid_cfg()
        };
        assert!(cfg.validate().is_err());
    }
}
