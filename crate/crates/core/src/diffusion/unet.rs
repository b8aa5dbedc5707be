use crate::config::PlannerConfig;
use crate::error::{ensure, Result};
use crate::numerics::{apply_affine, init_affine, ParamStore, Rng, Tape, Tensor, Var};

/// Width of the hidden time embedding fed to every block.
fn time_hidden(cfg: &PlannerConfig) -> usize {
    2 * cfg.time_embed_dim
}

/// `(name, in_channels, out_channels)` of the six residual blocks.
fn blocks(cfg: &PlannerConfig) -> [(&'static str, usize, usize); 6] {
    let (o, c1, c2) = (cfg.obs_embed_dim, cfg.unet_channels, cfg.unet_mid_channels);
    [
        ("down1", o, c1),
        ("down2", c1, c2),
        ("mid1", c2, c2),
        ("mid2", c2, c2),
        ("up1", 2 * c2, c1),
        ("up2", 2 * c1, c1),
    ]
}

fn init_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, width: usize, rng: &mut Rng) {
    store.insert_normal(name, &[cout, cin, width], (1.0 / (cin * width) as f64).sqrt(), rng);
}

pub fn init_unet(store: &mut ParamStore, cfg: &PlannerConfig, rng: &mut Rng) {
    let th = time_hidden(cfg);
    init_affine(store, "diffuser.time1", cfg.time_embed_dim, th, rng);
    init_affine(store, "diffuser.time2", th, th, rng);
    for (name, cin, cout) in blocks(cfg) {
        let p = format!("diffuser.{name}");
        init_conv(store, &format!("{p}.conv1"), cout, cin, cfg.conv_width, rng);
        init_conv(store, &format!("{p}.conv2"), cout, cout, cfg.conv_width, rng);
        for gn in ["gn1", "gn2"] {
            store.insert(format!("{p}.{gn}.gain"), Tensor::full(&[cout], 1.0));
            store.insert(format!("{p}.{gn}.bias"), Tensor::zeros(&[cout]));
        }
        init_affine(store, &format!("{p}.time"), th, cout, rng);
        init_affine(store, &format!("{p}.cond"), cfg.cond_dim, cout, rng);
        if cin != cout {
            init_conv(store, &format!("{p}.res"), cout, cin, 1, rng);
        }
    }
    init_conv(store, "diffuser.final", cfg.obs_embed_dim, cfg.unet_channels, 1, rng);
    store.insert_normal("diffuser.null_cond", &[cfg.cond_dim], 1.0, rng);
}

/// Sinusoidal features of the integer diffusion steps, `[B, dim]`.
pub fn step_features(steps: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(steps.len() * dim);
    for &s in steps {
        let freqs = (0..half).map(|k| (-(10_000f64.ln()) * k as f64 / (half.max(2) - 1) as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((s as f64 * f).sin(), (s as f64 * f).cos())).unzip();
        out.extend(sin);
        out.extend(cos);
    }
    Tensor::new(&[steps.len(), dim], out).expect("row widths add up")
}

#[allow(clippy::too_many_arguments)]
fn res_block(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PlannerConfig,
    name: &str,
    x: Var,
    temb: Var,
    cond: Var,
) -> Result<Var> {
    let p = format!("diffuser.{name}");
    let k1 = tape.param(store, &format!("{p}.conv1"))?;
    let h = tape.conv1d(x, k1)?;
    let (g, b) = (tape.param(store, &format!("{p}.gn1.gain"))?, tape.param(store, &format!("{p}.gn1.bias"))?);
    let h = tape.group_norm(h, cfg.norm_groups, g, b)?;
    let h = tape.mish(h);
    let t = apply_affine(tape, store, &format!("{p}.time"), temb)?;
    let h = tape.add_channel(h, t)?;
    let c = apply_affine(tape, store, &format!("{p}.cond"), cond)?;
    let h = tape.add_channel(h, c)?;
    let k2 = tape.param(store, &format!("{p}.conv2"))?;
    let h = tape.conv1d(h, k2)?;
    let (g, b) = (tape.param(store, &format!("{p}.gn2.gain"))?, tape.param(store, &format!("{p}.gn2.bias"))?);
    let h = tape.group_norm(h, cfg.norm_groups, g, b)?;
    let h = tape.mish(h);
    let skip = if store.contains(&format!("{p}.res")) {
        let r = tape.param(store, &format!("{p}.res"))?;
        tape.conv1d(x, r)?
    } else {
        x
    };
    tape.add(h, skip)
}

/// `ε_θ(x, i, y)` for `x[B, obs_embed_dim, plan_len]`, one step per row and
/// a condition `cond[B, cond_dim]`.
pub fn predict_noise(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &PlannerConfig,
    x: Var,
    steps: &[usize],
    cond: Var,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    ensure!(
        shape.len() == 3 && shape[0] == steps.len() && shape[1] == cfg.obs_embed_dim && shape[2].is_multiple_of(4),
        Contract,
        "noise model input {:?} incompatible with {} steps and width {}",
        shape,
        steps.len(),
        cfg.obs_embed_dim
    );
    tape.value(cond).expect_shape(&[steps.len(), cfg.cond_dim])?;
    let feats = tape.constant(step_features(steps, cfg.time_embed_dim));
    let t = apply_affine(tape, store, "diffuser.time1", feats)?;
    let t = tape.mish(t);
    let t = apply_affine(tape, store, "diffuser.time2", t)?;
    let temb = tape.mish(t);

    let h1 = res_block(tape, store, cfg, "down1", x, temb, cond)?;
    let h = tape.avg_pool2(h1)?;
    let h2 = res_block(tape, store, cfg, "down2", h, temb, cond)?;
    let h = tape.avg_pool2(h2)?;
    let h = res_block(tape, store, cfg, "mid1", h, temb, cond)?;
    let h = res_block(tape, store, cfg, "mid2", h, temb, cond)?;
    let h = tape.upsample2(h)?;
    let h = tape.concat_channels(h, h2)?;
    let h = res_block(tape, store, cfg, "up1", h, temb, cond)?;
    let h = tape.upsample2(h)?;
    let h = tape.concat_channels(h, h1)?;
    let h = res_block(tape, store, cfg, "up2", h, temb, cond)?;
    let k = tape.param(store, "diffuser.final")?;
    let out = tape.conv1d(h, k)?;
    tape.ensure_finite(out, "noise prediction")?;
    Ok(out)
}

/// `[B]` trajectories of shape `[T, D]` into one `[B, D, T]` tensor.
pub fn to_channels(trajs: &[Tensor]) -> Result<Tensor> {
    ensure!(!trajs.is_empty(), Contract, "no trajectories");
    let (t, d) = (trajs[0].dim(0), trajs[0].dim(1));
    let mut out = vec![0.0; trajs.len() * d * t];
    for (b, tr) in trajs.iter().enumerate() {
        tr.expect_shape(&[t, d])?;
        for i in 0..t {
            for j in 0..d {
                out[(b * d + j) * t + i] = tr.data()[i * d + j];
            }
        }
    }
    Tensor::new(&[trajs.len(), d, t], out)
}

/// Inverse of [`to_channels`].
pub fn from_channels(x: &Tensor) -> Vec<Tensor> {
    let (bsz, d, t) = (x.dim(0), x.dim(1), x.dim(2));
    (0..bsz)
        .map(|b| {
            let mut m = vec![0.0; t * d];
            for j in 0..d {
                for i in 0..t {
                    m[i * d + j] = x.data()[(b * d + j) * t + i];
                }
            }
            Tensor::new(&[t, d], m).expect("sizes agree")
        })
        .collect()
}
