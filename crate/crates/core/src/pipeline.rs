//! Inference: emotion + content to a stylized image.

use crate::encoders::{encode_content, encode_text, init_text_embedding, EmotionLabel};
use crate::error::{Error, Result};
use crate::generator::{sample_image, NetVelocity};
use crate::image::Image;
use crate::numerics::{ParamSet, Real, SeedRng, Tensor};
use crate::quantizer::StyleDictionaries;
use crate::reasoner::reason;
use crate::training::Arch;

/// Seed of the frozen text embedding table.
pub const TEXT_EMBED_SEED: u64 = 0x7e47;

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_S_STYLE: f64 = 1.5;
pub const DEFAULT_S_CONTENT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleSettings {
    pub steps: usize,
    pub s_style: f64,
    pub s_content: f64,
    pub seed: u64,
}

impl Default for SampleSettings {
    fn default() -> Self {
        SampleSettings {
            steps: DEFAULT_STEPS,
            s_style: DEFAULT_S_STYLE,
            s_content: DEFAULT_S_CONTENT,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Content<'a> {
    Image(&'a Image),
    Prompt(&'a str),
}

/// Style code chosen for a request.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleChoice {
    pub k: usize,
    pub z: Vec<f64>,
    /// Reasoner output; absent when the prototype was picked by index.
    pub query: Option<Vec<f64>>,
}

/// Trained model plus frozen dictionaries.
pub struct Stylizer<'a, T: Real> {
    pub params: &'a ParamSet<T>,
    pub arch: Arch,
    pub dicts: &'a StyleDictionaries,
    text_table: ParamSet<T>,
}

impl<'a, T: Real> Stylizer<'a, T> {
    pub fn new(params: &'a ParamSet<T>, arch: Arch, dicts: &'a StyleDictionaries) -> Self {
        let mut text_table = ParamSet::new();
        init_text_embedding(
            &mut text_table,
            arch.reasoner.width,
            &mut SeedRng::new(TEXT_EMBED_SEED),
        );
        Stylizer {
            params,
            arch,
            dicts,
            text_table,
        }
    }

    /// Content tokens and the image the generator is conditioned on.
    fn condition(&self, content: Content) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.arch.vnet.size;
        match content {
            Content::Image(img) => {
                img.expect_square(s)?;
                Ok((encode_content(img, self.params)?.tokens, img.to_tensor()))
            }
            Content::Prompt(p) => Ok((
                encode_text(p, &self.text_table)?.tokens,
                Tensor::zeros(&[3, s, s]),
            )),
        }
    }

    /// Quantized style query, or prototype `style_index` when given.
    pub fn choose_style(
        &self,
        content: Content,
        emotion: EmotionLabel,
        style_index: Option<usize>,
    ) -> Result<StyleChoice> {
        let dict = self.dicts.get(emotion);
        if let Some(k) = style_index {
            if k >= dict.k() {
                return Err(Error::InvalidArgument(format!(
                    "style index {k} out of range; the {emotion} dictionary has {} entries",
                    dict.k()
                )));
            }
            return Ok(StyleChoice {
                k,
                z: dict.entries[k].clone(),
                query: None,
            });
        }
        let (tokens, _) = self.condition(content)?;
        let q = reason(
            self.params,
            &self.arch.reasoner,
            emotion,
            &crate::encoders::ContentTokens {
                tokens,
                raw_features: None,
            },
        )?;
        let quant = self.dicts.lookup(&q.0, emotion);
        Ok(StyleChoice {
            k: quant.k,
            z: quant.z,
            query: Some(q.0),
        })
    }

    /// Samples with an explicit style code.
    pub fn render(&self, content: Content, z: &[f64], settings: &SampleSettings) -> Result<Image> {
        let (tokens, content_image) = self.condition(content)?;
        let model = NetVelocity {
            params: self.params,
            cfg: self.arch.vnet,
            tokens,
            content_image,
            style: Tensor::from_f64(&[z.len()], z)?,
        };
        sample_image(
            &model,
            self.arch.vnet.size,
            settings.steps,
            settings.s_style,
            settings.s_content,
            settings.seed,
        )
    }

    pub fn stylize(
        &self,
        content: Content,
        emotion: EmotionLabel,
        style_index: Option<usize>,
        settings: &SampleSettings,
    ) -> Result<Image> {
        let choice = self.choose_style(content, emotion, style_index)?;
        self.render(content, &choice.z, settings)
    }
}
