//! Emotion-content reasoner.
//!
//! The projected one-hot emotion is prepended as a token to the 16 content
//! tokens. The 17-token sequence passes through pre-norm transformer blocks
//!
//! ```text
//! h = MSA(LN(x)) + x
//! x = MLP(LN(h)) + h
//! ```
//!
//! and the style query is the output head applied to position 0.

use crate::encoders::{
    encode_emotion, init_content_projection, project_content, ContentTokens, EmotionLabel,
    EMBED_DIM, NUM_EMOTIONS, STYLE_DIM,
};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Real, SeedRng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReasonerConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub style_dim: usize,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            width: EMBED_DIM,
            heads: 4,
            blocks: 4,
            mlp_hidden: 4 * EMBED_DIM,
            style_dim: STYLE_DIM,
        }
    }
}

/// Continuous style query in the style-feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleQuery(pub Vec<f64>);

fn block_prefix(i: usize) -> String {
    format!("reasoner.blocks.{i}")
}

/// Parameters of the reasoner and both input projections.
pub fn init_reasoner_params<T: Real>(cfg: &ReasonerConfig, rng: &mut SeedRng) -> ParamSet<T> {
    let mut p = ParamSet::new();
    let w = cfg.width;
    p.insert_randn("emotion_proj.weight", &[NUM_EMOTIONS, w], 1, 1.0, rng);
    p.insert("emotion_proj.bias", Tensor::zeros(&[w]));
    init_content_projection(&mut p, w, rng);
    for i in 0..cfg.blocks {
        let b = block_prefix(i);
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{b}.{ln}.gain"), Tensor::full(&[w], T::one()));
            p.insert(format!("{b}.{ln}.bias"), Tensor::zeros(&[w]));
        }
        for proj in ["q", "k", "v", "out"] {
            p.insert_randn(format!("{b}.attn.{proj}.weight"), &[w, w], w, 1.0, rng);
            p.insert(format!("{b}.attn.{proj}.bias"), Tensor::zeros(&[w]));
        }
        p.insert_randn(
            format!("{b}.mlp.fc1.weight"),
            &[w, cfg.mlp_hidden],
            w,
            1.0,
            rng,
        );
        p.insert(
            format!("{b}.mlp.fc1.bias"),
            Tensor::zeros(&[cfg.mlp_hidden]),
        );
        p.insert_randn(
            format!("{b}.mlp.fc2.weight"),
            &[cfg.mlp_hidden, w],
            cfg.mlp_hidden,
            1.0,
            rng,
        );
        p.insert(format!("{b}.mlp.fc2.bias"), Tensor::zeros(&[w]));
    }
    p.insert_randn("reasoner.head.weight", &[w, cfg.style_dim], w, 1.0, rng);
    p.insert("reasoner.head.bias", Tensor::zeros(&[cfg.style_dim]));
    p
}

/// Names of every attention and MLP weight/bias; zeroing them makes each block the identity.
pub fn sublayer_param_names(cfg: &ReasonerConfig) -> Vec<String> {
    let mut names = Vec::new();
    for i in 0..cfg.blocks {
        let b = block_prefix(i);
        for proj in [
            "attn.q", "attn.k", "attn.v", "attn.out", "mlp.fc1", "mlp.fc2",
        ] {
            names.push(format!("{b}.{proj}.weight"));
            names.push(format!("{b}.{proj}.bias"));
        }
    }
    names
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

/// One pre-norm residual block over a `[n, width]` sequence.
pub fn block<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &ReasonerConfig,
    index: usize,
    x: Var,
) -> Result<Var> {
    let b = block_prefix(index);
    let g1 = tape.param(params, &format!("{b}.ln1.gain"))?;
    let b1 = tape.param(params, &format!("{b}.ln1.bias"))?;
    let n1 = tape.layer_norm(x, g1, b1)?;
    let q = linear(tape, params, n1, &format!("{b}.attn.q"))?;
    let k = linear(tape, params, n1, &format!("{b}.attn.k"))?;
    let v = linear(tape, params, n1, &format!("{b}.attn.v"))?;
    let a = tape.attention(q, k, v, cfg.heads)?;
    let a = linear(tape, params, a, &format!("{b}.attn.out"))?;
    let h = tape.add(a, x)?;

    let g2 = tape.param(params, &format!("{b}.ln2.gain"))?;
    let b2 = tape.param(params, &format!("{b}.ln2.bias"))?;
    let n2 = tape.layer_norm(h, g2, b2)?;
    let m = linear(tape, params, n2, &format!("{b}.mlp.fc1"))?;
    let m = tape.gelu(m);
    let m = linear(tape, params, m, &format!("{b}.mlp.fc2"))?;
    tape.add(m, h)
}

/// Projected emotion token `[1, width]`.
pub fn emotion_token<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    emotion: EmotionLabel,
) -> Result<Var> {
    let one_hot = Tensor::from_f64(&[1, NUM_EMOTIONS], &encode_emotion(emotion))?;
    let e = tape.constant(one_hot);
    linear(tape, params, e, "emotion_proj")
}

/// Runs the reasoner on already-embedded content tokens `[16, width]` and
/// returns the style query `[style_dim]`.
pub fn reason_tokens<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &ReasonerConfig,
    emotion: EmotionLabel,
    content: Var,
) -> Result<Var> {
    let width = tape.value(content).shape()[1];
    if width != cfg.width {
        return Err(Error::shape(
            "reason",
            tape.value(content).shape(),
            &[16, cfg.width],
        ));
    }
    let e = emotion_token(tape, params, emotion)?;
    let mut x = tape.concat(&[e, content])?;
    for i in 0..cfg.blocks {
        x = block(tape, params, cfg, i, x)?;
    }
    let first = tape.slice(x, 0, 1)?;
    let q = linear(tape, params, first, "reasoner.head")?;
    tape.reshape(q, &[cfg.style_dim])
}

/// Reasoner on raw patch statistics `[16, 8]`, projecting them on the tape so
/// the content projection is trained jointly.
pub fn reason_patches<'a, T: Real>(
    tape: &mut Tape<'a, T>,
    params: &'a ParamSet<T>,
    cfg: &ReasonerConfig,
    emotion: EmotionLabel,
    raw: Var,
) -> Result<Var> {
    let tokens = project_content(tape, params, raw)?;
    reason_tokens(tape, params, cfg, emotion, tokens)
}

/// Style query for an emotion and encoded content (no gradients).
pub fn reason<T: Real>(
    params: &ParamSet<T>,
    cfg: &ReasonerConfig,
    emotion: EmotionLabel,
    content: &ContentTokens<T>,
) -> Result<StyleQuery> {
    let mut tape = Tape::new();
    let q = match &content.raw_features {
        Some(raw) => {
            let r = tape.constant(raw.clone());
            reason_patches(&mut tape, params, cfg, emotion, r)?
        }
        None => {
            let c = tape.constant(content.tokens.clone());
            reason_tokens(&mut tape, params, cfg, emotion, c)?
        }
    };
    let v = tape.value(q);
    if !v.is_finite() {
        return Err(Error::NonFinite("style query".into()));
    }
    Ok(StyleQuery(v.to_f64_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::NUM_TOKENS;
    use crate::numerics::grad_check;

    fn small() -> ReasonerConfig {
        ReasonerConfig {
            width: 8,
            heads: 2,
            blocks: 4,
            mlp_hidden: 12,
            style_dim: 6,
        }
    }

    fn random_content<T: Real>(width: usize, seed: u64) -> ContentTokens<T> {
        let mut rng = SeedRng::new(seed);
        ContentTokens {
            tokens: Tensor::randn(&[NUM_TOKENS, width], 1.0, &mut rng),
            raw_features: None,
        }
    }

    #[test]
    fn zero_sublayers_give_the_residual_identity() {
        let cfg = ReasonerConfig::default();
        let mut params = init_reasoner_params::<f64>(&cfg, &mut SeedRng::new(1));
        for name in sublayer_param_names(&cfg) {
            params
                .get_mut(&name)
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let head = params.get_mut("reasoner.head.weight").unwrap();
        head.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for i in 0..cfg.width {
            head.data_mut()[i * cfg.style_dim + i] = 1.0;
        }
        let content = random_content::<f64>(cfg.width, 2);
        for e in EmotionLabel::ALL {
            let q = reason(&params, &cfg, e, &content).unwrap();
            let mut tape = Tape::new();
            let tok = emotion_token(&mut tape, &params, e).unwrap();
            assert_eq!(q.0, tape.value(tok).to_f64_vec());

            // The whole sequence is untouched too.
            let mut tape = Tape::new();
            let c = tape.constant(content.tokens.clone());
            let e_tok = emotion_token(&mut tape, &params, e).unwrap();
            let seq = tape.concat(&[e_tok, c]).unwrap();
            let mut x = seq;
            for i in 0..cfg.blocks {
                x = block(&mut tape, &params, &cfg, i, x).unwrap();
            }
            assert_eq!(tape.value(x), tape.value(seq));
        }
    }

    #[test]
    fn different_content_gives_different_queries() {
        let cfg = ReasonerConfig::default();
        let params = init_reasoner_params::<f64>(&cfg, &mut SeedRng::new(3));
        let a = reason(
            &params,
            &cfg,
            EmotionLabel::Fear,
            &random_content(cfg.width, 4),
        )
        .unwrap();
        let b = reason(
            &params,
            &cfg,
            EmotionLabel::Fear,
            &random_content(cfg.width, 5),
        )
        .unwrap();
        assert!(crate::encoders::l2(&a.0, &b.0) > 0.0);
    }

    #[test]
    fn emotions_give_pairwise_distinct_queries() {
        let cfg = ReasonerConfig::default();
        let params = init_reasoner_params::<f64>(&cfg, &mut SeedRng::new(6));
        let content = random_content(cfg.width, 7);
        let qs: Vec<_> = EmotionLabel::ALL
            .iter()
            .map(|&e| reason(&params, &cfg, e, &content).unwrap())
            .collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert!(crate::encoders::l2(&qs[i].0, &qs[j].0) > 0.0);
            }
        }
    }

    /// Naive single-block, single-head computation on two tokens of width 4.
    #[test]
    fn single_block_matches_hand_computation() {
        let cfg = ReasonerConfig {
            width: 4,
            heads: 1,
            blocks: 1,
            mlp_hidden: 3,
            style_dim: 4,
        };
        let mut rng = SeedRng::new(17);
        let mut params = init_reasoner_params::<f64>(&cfg, &mut rng);
        // Perturb norms and biases so every parameter matters.
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for n in &names {
            for v in params.get_mut(n).unwrap().data_mut() {
                *v += 0.1 * rng.normal();
            }
        }
        let x0: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();

        let get = |n: &str| params.get(n).unwrap().data().to_vec();
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let m = x.iter().sum::<f64>() / 4.0;
            let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            (0..4)
                .map(|i| g[i] * (x[i] - m) / (v + 1e-5).sqrt() + b[i])
                .collect()
        };
        let lin = |x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize| -> Vec<f64> {
            (0..dout)
                .map(|j| b[j] + (0..din).map(|i| x[i] * w[i * dout + j]).sum::<f64>())
                .collect()
        };
        let gelu = |x: f64| {
            0.5 * x
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let p = "reasoner.blocks.0";
        let n1: Vec<Vec<f64>> = x0
            .iter()
            .map(|x| {
                ln(
                    x,
                    &get(&format!("{p}.ln1.gain")),
                    &get(&format!("{p}.ln1.bias")),
                )
            })
            .collect();
        let proj = |n: &str, x: &[f64]| {
            lin(
                x,
                &get(&format!("{p}.attn.{n}.weight")),
                &get(&format!("{p}.attn.{n}.bias")),
                4,
                4,
            )
        };
        let q: Vec<_> = n1.iter().map(|x| proj("q", x)).collect();
        let k: Vec<_> = n1.iter().map(|x| proj("k", x)).collect();
        let v: Vec<_> = n1.iter().map(|x| proj("v", x)).collect();
        let mut expected = Vec::new();
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / 2.0)
                .collect();
            let z = s[0].exp() + s[1].exp();
            let att: Vec<f64> = (0..4)
                .map(|c| (s[0].exp() * v[0][c] + s[1].exp() * v[1][c]) / z)
                .collect();
            let o = proj("out", &att);
            let h: Vec<f64> = (0..4).map(|c| o[c] + x0[i][c]).collect();
            let n2 = ln(
                &h,
                &get(&format!("{p}.ln2.gain")),
                &get(&format!("{p}.ln2.bias")),
            );
            let m: Vec<f64> = lin(
                &n2,
                &get(&format!("{p}.mlp.fc1.weight")),
                &get(&format!("{p}.mlp.fc1.bias")),
                4,
                3,
            )
            .into_iter()
            .map(gelu)
            .collect();
            let m = lin(
                &m,
                &get(&format!("{p}.mlp.fc2.weight")),
                &get(&format!("{p}.mlp.fc2.bias")),
                3,
                4,
            );
            expected.extend((0..4).map(|c| m[c] + h[c]));
        }

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 4], &x0.concat()).unwrap());
        let y = block(&mut tape, &params, &cfg, 0, x).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn reasoner_gradients_match_finite_differences() {
        let cfg = small();
        for seed in 0..3 {
            let mut rng = SeedRng::new(seed);
            let params = init_reasoner_params::<f64>(&cfg, &mut rng);
            let raw = Tensor::<f64>::randn(&[NUM_TOKENS, 8], 0.5, &mut rng);
            let target = Tensor::<f64>::randn(&[cfg.style_dim], 1.0, &mut rng);
            let r = grad_check(
                |tape, p| {
                    let x = tape.constant(raw.clone());
                    let q = reason_patches(tape, p, &cfg, EmotionLabel::Awe, x)?;
                    let t = tape.constant(target.clone());
                    tape.sq_dist(q, t)
                },
                &params,
                1e-5,
            )
            .unwrap();
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
        }
    }
}
