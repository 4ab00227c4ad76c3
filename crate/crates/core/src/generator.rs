//! Flow-matching generator: a small convolutional velocity network, the
//! rectified-flow training loss, guidance dropout and Euler sampling.
//!
//! The noise path is `x_t = (1 - t) x0 + t eps` with target velocity
//! `eps - x0`; sampling integrates from `t = 1` down to `t = 0`.

use crate::encoders::{EMBED_DIM, STYLE_DIM};
use crate::error::{Error, Result};
use crate::image::{Image, SIZE};
use crate::numerics::{ParamSet, Real, SeedRng, Tape, Tensor, Var};

pub const TIME_FEATURES: usize = 32;
const TAG_SAMPLE_NOISE: u32 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VelocityNetConfig {
    pub channels: usize,
    pub blocks: usize,
    pub cond_dim: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    /// Image side length.
    pub size: usize,
}

impl Default for VelocityNetConfig {
    fn default() -> Self {
        VelocityNetConfig {
            channels: 32,
            blocks: 4,
            cond_dim: 64,
            content_dim: EMBED_DIM,
            style_dim: STYLE_DIM,
            size: SIZE,
        }
    }
}

/// Sinusoidal features of `t` at log-spaced frequencies from 1 to 100.
pub fn time_features(t: f64) -> Vec<f64> {
    let half = TIME_FEATURES / 2;
    let mut out = Vec::with_capacity(TIME_FEATURES);
    for i in 0..half {
        let w = (i as f64 / (half - 1) as f64 * 100f64.ln()).exp();
        out.push((t * w).sin());
    }
    for i in 0..half {
        let w = (i as f64 / (half - 1) as f64 * 100f64.ln()).exp();
        out.push((t * w).cos());
    }
    out
}

pub fn init_velocity_params<T: Real>(cfg: &VelocityNetConfig, rng: &mut SeedRng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    let (c, d) = (cfg.channels, cfg.cond_dim);
    p.insert_randn(
        "vnet.time.weight",
        &[TIME_FEATURES, d],
        TIME_FEATURES,
        1.0,
        rng,
    );
    p.insert("vnet.time.bias", Tensor::zeros(&[d]));
    let cat = cfg.content_dim + cfg.style_dim + d;
    p.insert_randn("vnet.cond.weight", &[cat, d], cat, 1.0, rng);
    p.insert("vnet.cond.bias", Tensor::zeros(&[d]));
    p.insert_randn("vnet.null_content", &[cfg.content_dim], 1, 0.1, rng);
    p.insert_randn("vnet.null_style", &[cfg.style_dim], 1, 0.1, rng);
    // Noisy image plus content image.
    p.insert_randn("vnet.conv_in.weight", &[c, 6, 3, 3], 54, 1.0, rng);
    p.insert("vnet.conv_in.bias", Tensor::zeros(&[c]));
    for i in 0..cfg.blocks {
        p.insert_randn(
            format!("vnet.blocks.{i}.film.weight"),
            &[d, 2 * c],
            d,
            0.5,
            rng,
        );
        p.insert(
            format!("vnet.blocks.{i}.film.bias"),
            Tensor::zeros(&[2 * c]),
        );
        p.insert_randn(
            format!("vnet.blocks.{i}.conv.weight"),
            &[c, c, 3, 3],
            9 * c,
            0.5,
            rng,
        );
        p.insert(format!("vnet.blocks.{i}.conv.bias"), Tensor::zeros(&[c]));
    }
    p.insert_randn("vnet.conv_out.weight", &[3, c, 3, 3], 9 * c, 0.5, rng);
    p.insert("vnet.conv_out.bias", Tensor::zeros(&[3]));
    p
}

/// Conditioning inputs on a tape. `None` selects the learned null condition.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    /// Content tokens `[16, content_dim]` and the content image `[3, s, s]`.
    pub content: Option<(Var, Var)>,
    /// Style code `[style_dim]`.
    pub style: Option<Var>,
}

fn linear<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.affine(x, w, Some(b))
}

fn conv<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    x: Var,
    name: &str,
) -> Result<Var> {
    let w = tape.param(params, &format!("{name}.weight"))?;
    let b = tape.param(params, &format!("{name}.bias"))?;
    tape.conv3x3(x, w, b)
}

/// `v(x_t, t, cond)` with output shape equal to `x_t`.
pub fn velocity<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &VelocityNetConfig,
    x_t: Var,
    t: f64,
    cond: CondVars,
) -> Result<Var> {
    let shape = tape.value(x_t).shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape("velocity", &shape, &[3, cfg.size, cfg.size]));
    }
    let c = cfg.channels;
    let tf = Tensor::from_f64(&[1, TIME_FEATURES], &time_features(t))?;
    let tf = tape.constant(tf);
    let temb = linear(tape, params, tf, "vnet.time")?;
    let temb = tape.reshape(temb, &[cfg.cond_dim])?;

    let (pooled, image) = match cond.content {
        Some((tokens, image)) => (tape.mean_rows(tokens)?, image),
        None => (
            tape.param(params, "vnet.null_content")?,
            tape.constant(Tensor::zeros(&shape)),
        ),
    };
    let style = match cond.style {
        Some(s) => s,
        None => tape.param(params, "vnet.null_style")?,
    };
    let cat = tape.concat(&[pooled, style, temb])?;
    let n = tape.value(cat).len();
    let cat = tape.reshape(cat, &[1, n])?;
    let h = linear(tape, params, cat, "vnet.cond")?;
    let cond_vec = tape.gelu(h);

    let input = tape.concat(&[x_t, image])?;
    let mut h = conv(tape, params, input, "vnet.conv_in")?;
    for i in 0..cfg.blocks {
        let fb = linear(tape, params, cond_vec, &format!("vnet.blocks.{i}.film"))?;
        let fb = tape.reshape(fb, &[2 * c])?;
        let gamma = tape.slice(fb, 0, c)?;
        let beta = tape.slice(fb, c, c)?;
        let m = tape.film(h, gamma, beta)?;
        let m = tape.gelu(m);
        let m = conv(tape, params, m, &format!("vnet.blocks.{i}.conv"))?;
        h = tape.add(h, m)?;
    }
    let h = tape.gelu(h);
    conv(tape, params, h, "vnet.conv_out")
}

/// Point on the noise path and its target velocity.
pub fn flow_pair<T: Real>(
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "flow time must lie in (0, 1), got {t}"
        )));
    }
    if x0.shape() != eps.shape() {
        return Err(Error::shape("flow_pair", x0.shape(), eps.shape()));
    }
    let tt = T::of(t);
    let xt = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (T::one() - tt) * x + tt * e)
        .collect();
    let v = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| e - x)
        .collect();
    Ok((Tensor::new(x0.shape(), xt)?, Tensor::new(x0.shape(), v)?))
}

/// Flow-matching loss: mean squared error between the predicted and target
/// velocity at `x_t = (1 - t) x0 + t eps`.
#[allow(clippy::too_many_arguments)]
pub fn fm_loss<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &VelocityNetConfig,
    x0: &Tensor<T>,
    eps: &Tensor<T>,
    t: f64,
    cond: CondVars,
) -> Result<Var> {
    let (xt, target) = flow_pair(x0, eps, t)?;
    let xt = tape.constant(xt);
    let v = velocity(tape, params, cfg, xt, t, cond)?;
    let target = tape.constant(target);
    tape.mse(v, target)
}

/// Which conditions are replaced by their null embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DropMask {
    pub drop_content: bool,
    pub drop_style: bool,
}

/// Independently drops the style and content conditions.
pub fn apply_guidance_dropout(
    p_drop_style: f64,
    p_drop_content: f64,
    rng: &mut SeedRng,
) -> Result<DropMask> {
    for p in [p_drop_style, p_drop_content] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "drop probability {p} outside [0, 1]"
            )));
        }
    }
    let drop_style = rng.bernoulli(p_drop_style);
    let drop_content = rng.bernoulli(p_drop_content);
    Ok(DropMask {
        drop_content,
        drop_style,
    })
}

/// The three conditions combined by guidance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Guide {
    Null,
    Content,
    ContentStyle,
}

/// A velocity field evaluated under one of the guidance conditions.
pub trait VelocityModel {
    fn velocity(&self, x: &[f64], t: f64, guide: Guide) -> Result<Vec<f64>>;
}

/// Guidance coefficients for `(null, content, content+style)`.
pub fn guidance_weights(s_style: f64, s_content: f64) -> [(f64, Guide); 3] {
    [
        (1.0 - s_content, Guide::Null),
        (s_content - s_style, Guide::Content),
        (s_style, Guide::ContentStyle),
    ]
}

/// Euler integration from `t = 1` to `t = 0` of the guided velocity
///
/// ```text
/// v = v(0,0) + s_content (v(c,0) - v(0,0)) + s_style (v(c,z) - v(c,0))
/// ```
///
/// Conditions with a zero coefficient are not evaluated.
pub fn integrate<M: VelocityModel + ?Sized>(
    model: &M,
    x1: Vec<f64>,
    steps: usize,
    s_style: f64,
    s_content: f64,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let mut v: Option<Vec<f64>> = None;
        for (coef, guide) in guidance_weights(s_style, s_content) {
            if coef == 0.0 {
                continue;
            }
            let vi = model.velocity(&x, t, guide)?;
            match &mut v {
                None => v = Some(vi.into_iter().map(|a| coef * a).collect()),
                Some(acc) => acc.iter_mut().zip(vi).for_each(|(a, b)| *a += coef * b),
            }
        }
        let v = v.unwrap_or_else(|| vec![0.0; x.len()]);
        x.iter_mut().zip(v).for_each(|(xi, vi)| *xi -= dt * vi);
    }
    Ok(x)
}

/// Seeded standard normal starting point.
pub fn initial_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeedRng::fork(seed, TAG_SAMPLE_NOISE, 0);
    (0..len).map(|_| rng.normal()).collect()
}

/// Samples a `size × size` image and clamps it to `[0, 1]`.
pub fn sample_image<M: VelocityModel + ?Sized>(
    model: &M,
    size: usize,
    steps: usize,
    s_style: f64,
    s_content: f64,
    seed: u64,
) -> Result<Image> {
    let x1 = initial_noise(3 * size * size, seed);
    let x = integrate(model, x1, steps, s_style, s_content)?;
    let mut img = Image::new(size, size, x.into_iter().map(|v| v as f32).collect())?;
    img.clamp01();
    Ok(img)
}

/// Velocity network bound to one content condition and style code.
pub struct NetVelocity<'p, T: Real> {
    pub params: &'p ParamSet<T>,
    pub cfg: VelocityNetConfig,
    pub tokens: Tensor<T>,
    pub content_image: Tensor<T>,
    pub style: Tensor<T>,
}

impl<T: Real> VelocityModel for NetVelocity<'_, T> {
    fn velocity(&self, x: &[f64], t: f64, guide: Guide) -> Result<Vec<f64>> {
        let s = self.cfg.size;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_f64(&[3, s, s], x)?);
        let content = match guide {
            Guide::Null => None,
            _ => Some((
                tape.constant_ref(&self.tokens),
                tape.constant_ref(&self.content_image),
            )),
        };
        let style = match guide {
            Guide::ContentStyle => Some(tape.constant_ref(&self.style)),
            _ => None,
        };
        let v = velocity(
            &mut tape,
            self.params,
            &self.cfg,
            xv,
            t,
            CondVars { content, style },
        )?;
        let out = tape.value(v);
        if !out.is_finite() {
            return Err(Error::NonFinite("velocity".into()));
        }
        Ok(out.to_f64_vec())
    }
}

/// Exact velocity field of a single data point: `(x - x0) / t`.
pub struct PointVelocity {
    pub x0: Vec<f64>,
}

impl VelocityModel for PointVelocity {
    fn velocity(&self, x: &[f64], t: f64, _guide: Guide) -> Result<Vec<f64>> {
        Ok(x.iter().zip(&self.x0).map(|(a, b)| (a - b) / t).collect())
    }
}

pub mod toy {
    //! Two-dimensional conditional flow used to validate the training and
    //! sampling loop against closed-form targets.

    use super::*;
    use crate::numerics::{Optimizer, OptimizerKind};

    pub const CODES: usize = 2;
    const HIDDEN: usize = 64;
    const TIME: usize = 16;
    const INPUT: usize = 2 + TIME + CODES;
    const TAG_BATCH: u32 = 48;

    /// Target mean of each condition code; both have isotropic std 0.1.
    pub const MEANS: [[f64; 2]; CODES] = [[1.0, 0.0], [-1.0, 0.0]];
    pub const STD: f64 = 0.1;

    pub fn init_params<T: Real>(rng: &mut SeedRng) -> ParamSet<T> {
        let mut p = ParamSet::new();
        p.insert_randn("toy.fc1.weight", &[INPUT, HIDDEN], INPUT, 1.0, rng);
        p.insert("toy.fc1.bias", Tensor::zeros(&[HIDDEN]));
        p.insert_randn("toy.fc2.weight", &[HIDDEN, HIDDEN], HIDDEN, 1.0, rng);
        p.insert("toy.fc2.bias", Tensor::zeros(&[HIDDEN]));
        p.insert_randn("toy.fc3.weight", &[HIDDEN, 2], HIDDEN, 1.0, rng);
        p.insert("toy.fc3.bias", Tensor::zeros(&[2]));
        p
    }

    fn input_row(x: [f64; 2], t: f64, code: Option<usize>) -> Vec<f64> {
        let mut row = vec![x[0], x[1]];
        for i in 0..TIME / 2 {
            let w = (i as f64 / (TIME / 2 - 1) as f64 * 20f64.ln()).exp();
            row.push((t * w).sin());
            row.push((t * w).cos());
        }
        for c in 0..CODES {
            row.push(if code == Some(c) { 1.0 } else { 0.0 });
        }
        row
    }

    fn forward<'a, T: Real>(
        tape: &mut Tape<'a, T>,
        params: &'a ParamSet<T>,
        rows: Vec<f64>,
    ) -> Result<Var> {
        let n = rows.len() / INPUT;
        let x = tape.constant(Tensor::from_f64(&[n, INPUT], &rows)?);
        let mut h = x;
        for (i, name) in ["toy.fc1", "toy.fc2", "toy.fc3"].iter().enumerate() {
            h = super::linear(tape, params, h, name)?;
            if i < 2 {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }

    /// One training sample: `(x0, eps, t, code)`.
    pub type ToySample = ([f64; 2], [f64; 2], f64, Option<usize>);

    /// Batched flow-matching loss over toy samples.
    pub fn loss<'a, T: Real>(
        tape: &mut Tape<'a, T>,
        params: &'a ParamSet<T>,
        batch: &[ToySample],
    ) -> Result<Var> {
        let mut rows = Vec::new();
        let mut target = Vec::new();
        for &(x0, eps, t, code) in batch {
            let xt = [
                (1.0 - t) * x0[0] + t * eps[0],
                (1.0 - t) * x0[1] + t * eps[1],
            ];
            rows.extend(input_row(xt, t, code));
            target.extend([eps[0] - x0[0], eps[1] - x0[1]]);
        }
        let v = forward(tape, params, rows)?;
        let target = tape.constant(Tensor::from_f64(&[batch.len(), 2], &target)?);
        tape.mse(v, target)
    }

    /// Seeded training batch; codes are dropped with probability `p_drop`.
    pub fn draw_batch(step: u64, size: usize, p_drop: f64, seed: u64) -> Vec<ToySample> {
        let mut rng = SeedRng::fork(seed, TAG_BATCH, step);
        (0..size)
            .map(|_| {
                let c = rng.below(CODES);
                let x0 = [
                    MEANS[c][0] + STD * rng.normal(),
                    MEANS[c][1] + STD * rng.normal(),
                ];
                let eps = [rng.normal(), rng.normal()];
                let t = loop {
                    let t = rng.uniform();
                    if t > 0.0 {
                        break t;
                    }
                };
                let code = if rng.bernoulli(p_drop) { None } else { Some(c) };
                (x0, eps, t, code)
            })
            .collect()
    }

    pub fn train(steps: u64, batch: usize, lr: f64, seed: u64) -> Result<ParamSet<f32>> {
        let mut params = init_params::<f32>(&mut SeedRng::new(seed));
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr);
        for step in 0..steps {
            let b = draw_batch(step, batch, 0.1, seed);
            let grads = {
                let mut tape = Tape::new();
                let l = loss(&mut tape, &params, &b)?;
                tape.backward(l)?.into_param_grads()
            };
            params.zero_grads();
            params.accumulate(&grads, 1.0)?;
            opt.update(&mut params)?;
        }
        Ok(params)
    }

    /// Trained toy field for a batch of points under one code.
    pub struct ToyVelocity<'p> {
        pub params: &'p ParamSet<f32>,
        pub code: usize,
    }

    impl VelocityModel for ToyVelocity<'_> {
        fn velocity(&self, x: &[f64], t: f64, guide: Guide) -> Result<Vec<f64>> {
            let code = match guide {
                Guide::ContentStyle => Some(self.code),
                _ => None,
            };
            let rows: Vec<f64> = x
                .chunks(2)
                .flat_map(|p| input_row([p[0], p[1]], t, code))
                .collect();
            let mut tape = Tape::new();
            let v = forward(&mut tape, self.params, rows)?;
            Ok(tape.value(v).to_f64_vec())
        }
    }

    /// `n` samples for one code, returned as flat `[x, y]` pairs.
    pub fn sample(
        params: &ParamSet<f32>,
        code: usize,
        n: usize,
        steps: usize,
        seed: u64,
    ) -> Result<Vec<f64>> {
        let model = ToyVelocity { params, code };
        integrate(&model, initial_noise(2 * n, seed), steps, 1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::NUM_TOKENS;
    use crate::numerics::grad_check;

    fn small_cfg() -> VelocityNetConfig {
        VelocityNetConfig {
            channels: 4,
            blocks: 2,
            cond_dim: 6,
            content_dim: 5,
            style_dim: 3,
            size: 8,
        }
    }

    #[test]
    fn point_field_integrates_exactly() {
        let mut rng = SeedRng::new(9);
        let x0: Vec<f64> = (0..3 * 16).map(|_| rng.uniform()).collect();
        let model = PointVelocity { x0: x0.clone() };
        for steps in [1, 10, 50] {
            let x = integrate(&model, initial_noise(x0.len(), 3), steps, 1.0, 1.0).unwrap();
            let err = x
                .iter()
                .zip(&x0)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-6, "{steps}: {err}");
        }
    }

    struct Recorder<'a>(std::cell::RefCell<Vec<Guide>>, &'a PointVelocity);

    impl VelocityModel for Recorder<'_> {
        fn velocity(&self, x: &[f64], t: f64, guide: Guide) -> Result<Vec<f64>> {
            self.0.borrow_mut().push(guide);
            let mut v = self.1.velocity(x, t, guide)?;
            if guide == Guide::ContentStyle {
                v.iter_mut().for_each(|a| *a += 0.3);
            }
            Ok(v)
        }
    }

    #[test]
    fn content_only_guidance_evaluates_only_the_content_branch() {
        let pv = PointVelocity { x0: vec![0.2; 12] };
        let rec = Recorder(Default::default(), &pv);
        let a = integrate(&rec, initial_noise(12, 1), 5, 0.0, 1.0).unwrap();
        assert!(rec.0.borrow().iter().all(|&g| g == Guide::Content));
        let direct = integrate(&pv, initial_noise(12, 1), 5, 1.0, 1.0).unwrap();
        assert_eq!(a, direct);
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = small_cfg();
        let mut rng = SeedRng::new(2);
        let params = init_velocity_params::<f32>(&cfg, &mut rng);
        let model = NetVelocity {
            params: &params,
            cfg,
            tokens: Tensor::randn(&[NUM_TOKENS, 5], 1.0, &mut rng),
            content_image: Tensor::randn(&[3, 8, 8], 1.0, &mut rng),
            style: Tensor::randn(&[3], 1.0, &mut rng),
        };
        let a = sample_image(&model, 8, 4, 2.0, 1.0, 11).unwrap();
        let b = sample_image(&model, 8, 4, 2.0, 1.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.width(), a.height()), (8, 8));
    }

    #[test]
    fn perfect_predictor_has_zero_loss_and_errors_scale_quadratically() {
        let mut rng = SeedRng::new(3);
        let x0 = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let (_, v) = flow_pair(&x0, &eps, 0.3).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(v.clone());
        let b = tape.constant(v.clone());
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let err = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
        let mut off1 = v.clone();
        off1.add_assign(&err).unwrap();
        let mut err2 = err.clone();
        err2.scale_in_place(2.0);
        let mut off2 = v.clone();
        off2.add_assign(&err2).unwrap();
        let mut tape = Tape::new();
        let (t0, t1, t2) = (tape.constant(v), tape.constant(off1), tape.constant(off2));
        let l1 = tape.mse(t1, t0).unwrap();
        let l2 = tape.mse(t2, t0).unwrap();
        assert!((tape.value(l2).item() - 4.0 * tape.value(l1).item()).abs() < 1e-12);

        assert!(flow_pair(&x0, &x0, 0.0).is_err());
        assert!(flow_pair(&x0, &x0, 1.0).is_err());
    }

    #[test]
    fn fm_loss_gradients_match_finite_differences() {
        let cfg = small_cfg();
        for seed in 0..2 {
            let mut rng = SeedRng::new(seed);
            let params = init_velocity_params::<f64>(&cfg, &mut rng);
            let x0 = Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng);
            let eps = Tensor::<f64>::randn(&[3, 8, 8], 1.0, &mut rng);
            let tokens = Tensor::<f64>::randn(&[NUM_TOKENS, 5], 1.0, &mut rng);
            let image = Tensor::<f64>::randn(&[3, 8, 8], 0.5, &mut rng);
            let z = Tensor::<f64>::randn(&[3], 1.0, &mut rng);
            for (drop_c, drop_s) in [(false, false), (true, true)] {
                let r = grad_check(
                    |tape, p| {
                        let content = (!drop_c)
                            .then(|| (tape.constant(tokens.clone()), tape.constant(image.clone())));
                        let style = (!drop_s).then(|| tape.constant(z.clone()));
                        fm_loss(tape, p, &cfg, &x0, &eps, 0.37, CondVars { content, style })
                    },
                    &params,
                    1e-5,
                )
                .unwrap();
                assert!(r.max_rel_error <= 1e-4, "{r:?}");
            }
        }
    }

    #[test]
    fn dropout_rates() {
        let mut rng = SeedRng::new(1);
        assert_eq!(
            apply_guidance_dropout(0.0, 0.0, &mut rng).unwrap(),
            DropMask::default()
        );
        let all = apply_guidance_dropout(1.0, 1.0, &mut rng).unwrap();
        assert!(all.drop_style && all.drop_content);
        let n = 10_000;
        let (mut s, mut c) = (0, 0);
        for _ in 0..n {
            let m = apply_guidance_dropout(0.1, 0.1, &mut rng).unwrap();
            s += m.drop_style as usize;
            c += m.drop_content as usize;
        }
        assert!((s as f64 / n as f64 - 0.1).abs() < 0.01);
        assert!((c as f64 / n as f64 - 0.1).abs() < 0.01);
        assert!(apply_guidance_dropout(-0.1, 0.0, &mut rng).is_err());
    }
}
