//! The full pipeline: perturbation modules, cost volume, aggregation, decoder.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::costvol::{
    aggregate_backward, aggregate_forward, cost_backward, cost_forward, decode_forward, decode_backward,
    AggregateCache, AggregationBlock, AggregatorConfig, CostCache, CostEmbedding, CostFeatureVolume, DecodeCache,
    Decoder, Logits, COST_EPS,
};
use crate::encoders::{check_pairing, TextEmbedding, VisualFeatureMap};
use crate::error::{Error, Result};
use crate::nn::{join, Parameters};
use crate::rng::{self, Rng};
use crate::spm::{
    image_spm_apply, image_spm_backward, init_spm_params, sample_noise, text_spm_apply, text_spm_backward,
    ImageSpmCache, ImageSpmParams, NoiseSpec, SpmMode, TextSpmParams,
};

fn default_eps() -> f64 {
    COST_EPS
}

fn default_stages() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    #[serde(flatten)]
    pub aggregator: AggregatorConfig,
    #[serde(default = "default_stages")]
    pub decoder_stages: usize,
    pub sigma_t: f64,
    pub reduction_ratio: usize,
    /// Init std of the Image-SPM output projection; 0 starts the module as identity.
    #[serde(default)]
    pub image_spm_out_init_std: f64,
    #[serde(default = "default_true")]
    pub text_spm: bool,
    #[serde(default = "default_true")]
    pub image_spm: bool,
    #[serde(default = "default_eps")]
    pub cost_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            aggregator: AggregatorConfig::default(),
            decoder_stages: 2,
            sigma_t: 0.02,
            reduction_ratio: 2,
            image_spm_out_init_std: 0.0,
            text_spm: true,
            image_spm: true,
            cost_eps: COST_EPS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.aggregator.validate()?;
        if self.embed_dim < 2 {
            return Err(Error::Config(format!("embed_dim {} < 2", self.embed_dim)));
        }
        if self.reduction_ratio == 0 || self.reduction_ratio > self.embed_dim {
            return Err(Error::Config(format!(
                "reduction_ratio {} must be in 1..={}",
                self.reduction_ratio, self.embed_dim
            )));
        }
        if !(self.sigma_t >= 0.0) || !(self.image_spm_out_init_std >= 0.0) {
            return Err(Error::Config("init scales must be non-negative".into()));
        }
        if !(self.cost_eps > 0.0) {
            return Err(Error::Config("cost_eps must be positive".into()));
        }
        Ok(())
    }
}

/// All learnable parameters. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub text_spm: TextSpmParams,
    pub image_spm: ImageSpmParams,
    pub embed: CostEmbedding,
    pub blocks: Vec<AggregationBlock>,
    pub decoder: Decoder,
}

impl Parameters for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.text_spm.visit(&join(prefix, "text_spm"), f);
        self.image_spm.visit(&join(prefix, "image_spm"), f);
        self.embed.visit(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("agg{i}")), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.text_spm.visit_mut(&join(prefix, "text_spm"), f);
        self.image_spm.visit_mut(&join(prefix, "image_spm"), f);
        self.embed.visit_mut(&join(prefix, "embed"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("agg{i}")), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
    }
}

/// One noise draw for both perturbation modules.
#[derive(Debug, Clone, PartialEq)]
pub struct SpmNoise {
    pub text: Array1<f64>,
    /// `(H'*W') x C`.
    pub image: Array2<f64>,
}

impl SpmNoise {
    pub fn draw(spec: &NoiseSpec, embed_dim: usize, positions: usize, rng: &mut Rng) -> Result<Self> {
        let text = sample_noise(spec, &[embed_dim], rng)?
            .into_dimensionality()
            .expect("1-d");
        let image = sample_noise(spec, &[positions, embed_dim], rng)?
            .into_dimensionality()
            .expect("2-d");
        Ok(Self { text, image })
    }
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardPass {
    visual: Array2<f64>,
    num_classes: usize,
    noise: Option<SpmNoise>,
    image_cache: Option<ImageSpmCache>,
    cost: Array2<f64>,
    cost_cache: CostCache,
    agg_cache: AggregateCache,
    decode_cache: DecodeCache,
    pub logits: Array3<f64>,
}

impl ForwardPass {
    /// Raw `(H'*W') x N` cost matrix of this pass.
    pub fn cost(&self) -> &Array2<f64> {
        &self.cost
    }
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (text_spm, image_spm) = init_spm_params(
            config.embed_dim,
            config.sigma_t,
            config.reduction_ratio,
            config.image_spm_out_init_std,
            rng,
        )?;
        let d = config.aggregator.feature_dim;
        let embed = CostEmbedding::init(rng, d);
        let blocks = (0..config.aggregator.num_blocks)
            .map(|_| AggregationBlock::init(rng, d))
            .collect();
        let decoder = Decoder::init(rng, d, config.decoder_stages);
        Ok(Self {
            config,
            text_spm,
            image_spm,
            embed,
            blocks,
            decoder,
        })
    }

    pub fn init_seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut rng::stream(seed, &["init".into()]))
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    fn check_inputs(&self, visual: &VisualFeatureMap, text: &TextEmbedding) -> Result<()> {
        check_pairing(text, visual)?;
        if visual.embed_dim() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "model embed_dim {} vs encoder width {}",
                self.config.embed_dim,
                visual.embed_dim()
            )));
        }
        Ok(())
    }

    /// Draw the noise a training-mode pass on this input would use.
    pub fn draw_noise(&self, spec: &NoiseSpec, visual: &VisualFeatureMap, rng: &mut Rng) -> Result<SpmNoise> {
        let (h, w) = visual.grid();
        SpmNoise::draw(spec, self.config.embed_dim, h * w, rng)
    }

    /// Full forward pass. `noise = None` is evaluation mode (both SPMs identity).
    pub fn forward(
        &self,
        visual: &VisualFeatureMap,
        text: &TextEmbedding,
        target: (usize, usize),
        noise: Option<&SpmNoise>,
    ) -> Result<ForwardPass> {
        self.check_inputs(visual, text)?;
        let (h, w) = visual.grid();
        let v = visual.rows();
        let n = text.num_classes();
        let (t_hat, v_hat, image_cache) = match noise {
            None => (text.matrix.clone(), v.clone(), None),
            Some(z) => {
                if z.text.len() != self.config.embed_dim || z.image.dim() != v.dim() {
                    return Err(Error::Shape("noise draw does not match the input".into()));
                }
                let t_hat = if self.config.text_spm {
                    text_spm_apply(&text.matrix, &self.text_spm, &z.text)?
                } else {
                    text.matrix.clone()
                };
                let (v_hat, cache) = if self.config.image_spm {
                    let (out, cache) = image_spm_apply(v.view(), t_hat.view(), &self.image_spm, z.image.view())?;
                    (out, Some(cache))
                } else {
                    (v.clone(), None)
                };
                (t_hat, v_hat, cache)
            }
        };
        let (cost, cost_cache) = cost_forward(v_hat.view(), t_hat.view(), self.config.cost_eps);
        let feat = self.embed.forward(cost.view(), h, w);
        let (agg, agg_cache) = aggregate_forward(&feat, &self.blocks, self.config.aggregator.window)?;
        let (logits, decode_cache) = decode_forward(&agg, &self.decoder, target)?;
        Ok(ForwardPass {
            visual: v,
            num_classes: n,
            noise: noise.cloned(),
            image_cache,
            cost,
            cost_cache,
            agg_cache,
            decode_cache,
            logits,
        })
    }

    /// Gradients of a scalar loss given `dL/dlogits`.
    pub fn backward(&self, pass: &ForwardPass, d_logits: ArrayView3<f64>) -> Model {
        let mut grad = self.zeros_like();
        let d_agg = decode_backward(&self.decoder, &pass.decode_cache, d_logits, &mut grad.decoder);
        let d_feat = aggregate_backward(&self.blocks, &pass.agg_cache, d_agg, &mut grad.blocks);
        let d_cost = self.embed.backward(pass.cost.view(), d_feat.view(), &mut grad.embed);
        let (d_v, mut d_t) = cost_backward(&pass.cost_cache, d_cost.view(), self.config.cost_eps);
        if let Some(noise) = &pass.noise {
            if let Some(cache) = &pass.image_cache {
                d_t += &image_spm_backward(
                    pass.visual.view(),
                    pass.num_classes,
                    &self.image_spm,
                    cache,
                    noise.image.view(),
                    d_v.view(),
                    &mut grad.image_spm,
                );
            }
            if self.config.text_spm {
                text_spm_backward(&self.text_spm, &noise.text, d_t.view(), &mut grad.text_spm);
            }
        }
        grad
    }

    pub fn logits(
        &self,
        visual: &VisualFeatureMap,
        text: &TextEmbedding,
        mode: SpmMode,
        noise: Option<&SpmNoise>,
    ) -> Result<Logits> {
        let noise = match mode {
            SpmMode::Eval => None,
            SpmMode::Train => Some(noise.ok_or_else(|| {
                Error::InvalidArgument("training-mode forward needs a noise draw".into())
            })?),
        };
        let pass = self.forward(visual, text, visual.source_size, noise)?;
        Ok(Logits {
            tensor: pass.logits,
            class_names: text.class_names.clone(),
        })
    }

    /// The same pipeline with the perturbation modules taken out entirely.
    pub fn logits_without_spm(&self, visual: &VisualFeatureMap, text: &TextEmbedding) -> Result<Logits> {
        self.check_inputs(visual, text)?;
        let (h, w) = visual.grid();
        let (cost, _) = cost_forward(visual.rows().view(), text.matrix.view(), self.config.cost_eps);
        let feat: CostFeatureVolume = self.embed.forward(cost.view(), h, w);
        let (agg, _) = aggregate_forward(&feat, &self.blocks, self.config.aggregator.window)?;
        let (tensor, _) = decode_forward(&agg, &self.decoder, visual.source_size)?;
        Ok(Logits {
            tensor,
            class_names: text.class_names.clone(),
        })
    }

    /// Raw cost volume (`H' x W' x N`) with or without a perturbation draw.
    pub fn raw_cost(
        &self,
        visual: &VisualFeatureMap,
        text: &TextEmbedding,
        noise: Option<&SpmNoise>,
    ) -> Result<Array3<f64>> {
        self.check_inputs(visual, text)?;
        let (h, w) = visual.grid();
        let v = visual.rows();
        let (t_hat, v_hat) = match noise {
            None => (text.matrix.clone(), v),
            Some(z) => {
                let t_hat = if self.config.text_spm {
                    text_spm_apply(&text.matrix, &self.text_spm, &z.text)?
                } else {
                    text.matrix.clone()
                };
                let v_hat = if self.config.image_spm {
                    image_spm_apply(v.view(), t_hat.view(), &self.image_spm, z.image.view())?.0
                } else {
                    v
                };
                (t_hat, v_hat)
            }
        };
        let (cost, _) = cost_forward(v_hat.view(), t_hat.view(), self.config.cost_eps);
        Ok(cost
            .into_shape_with_order((h, w, text.num_classes()))
            .expect("standard layout"))
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.visit("", &mut |name, _, d| {
            if bad.is_none() && d.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::NonFinite(name)),
            None => Ok(()),
        }
    }
}
