//! The complete watermarking model: embedder, extractor and the coupling
//! parameters that tie their modulation modules together.

use crate::cim::{Cim, Coupling, GuidanceSignals};
use crate::config::RunConfig;
use crate::embedder::{EmbedOutput, Embedder};
use crate::error::{Error, Result};
use crate::extractor::{ExtractOutput, Extractor};
use crate::image_io::ImageTensor;
use crate::message::BitMessage;
use crate::params::ParamStore;
use crate::rng::tagged_stream;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub embedder: Embedder,
    pub extractor: Extractor,
    pub cim: Cim,
}

impl Model {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let embedder = Embedder::new(config);
        let extractor = Extractor::new(config);
        let cim = Cim::new(&embedder.slot_channels(), &extractor.slot_channels());
        Ok(Self {
            config: config.clone(),
            embedder,
            extractor,
            cim,
        })
    }

    /// Fresh parameters drawn from the run seed.
    pub fn init_params<T: Real>(&self) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let mut rng = tagged_stream(self.config.seed, "init", 0);
        self.embedder.init(&mut store, &mut rng);
        self.extractor.init(&mut store, &mut rng);
        self.cim.init(&mut store, &mut rng);
        store
    }

    pub fn embed_coupling(&self, guidance: Var) -> Coupling {
        Coupling {
            guidance,
            afmm_on: self.config.ablation.embedder_afmm,
            cim_on: self.config.ablation.cim,
        }
    }

    pub fn extract_coupling(&self, guidance: Var) -> Coupling {
        Coupling {
            guidance,
            afmm_on: self.config.ablation.extractor_afmm,
            cim_on: self.config.ablation.cim,
        }
    }

    pub fn embed_graph<T: Real>(&self, g: &mut Graph<T>, image: Var, signs: Var, p_e: Var) -> EmbedOutput {
        let coupling = self.embed_coupling(p_e);
        self.embedder.forward(g, image, signs, &coupling, &self.cim)
    }

    pub fn extract_graph<T: Real>(&self, g: &mut Graph<T>, image: Var, p_x: Var) -> ExtractOutput {
        let coupling = self.extract_coupling(p_x);
        self.extractor.forward(g, image, &coupling, &self.cim)
    }

    /// Watermarks a batch of equally sized images with frozen guidance.
    pub fn embed(
        &self,
        store: &ParamStore<f32>,
        images: &[ImageTensor],
        messages: &[BitMessage],
        guidance: &GuidanceSignals,
    ) -> Result<Vec<ImageTensor>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let batch = stack_images(images)?;
        let bits = messages.first().map_or(0, BitMessage::len);
        if messages.iter().any(|m| m.len() != bits) {
            return Err(Error::Contract("messages of different lengths".into()));
        }
        self.embedder.check_input(batch.shape(), messages.len(), bits)?;
        let mut g = Graph::with_params(store);
        let x = g.constant(batch);
        let signs = g.constant(Embedder::message_signs(messages));
        let (p_e, _) = Cim::guidance_constants(&mut g, guidance);
        let out = self.embed_graph(&mut g, x, signs, p_e);
        let result = g.value(out.image);
        if !result.all_finite() {
            return Err(Error::NonFinite("watermarked image".into()));
        }
        Ok((0..images.len()).map(|i| ImageTensor::from_tensor(result.item(i))).collect())
    }

    /// Per-bit probabilities for each image (any size ≥ 32×32).
    pub fn extract(
        &self,
        store: &ParamStore<f32>,
        images: &[ImageTensor],
        guidance: &GuidanceSignals,
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        let mut start = 0;
        // run consecutive same-sized images as one batch
        while start < images.len() {
            let shape = images[start].tensor().shape().to_vec();
            let mut end = start + 1;
            while end < images.len() && images[end].tensor().shape() == shape.as_slice() {
                end += 1;
            }
            let batch = stack_images(&images[start..end])?;
            Extractor::check_input(batch.shape())?;
            let mut g = Graph::with_params(store);
            let x = g.constant(batch);
            let (_, p_x) = Cim::guidance_constants(&mut g, guidance);
            let res = self.extract_graph(&mut g, x, p_x);
            let logits = g.value(res.logits);
            if !logits.all_finite() {
                return Err(Error::NonFinite("extractor logits".into()));
            }
            let l = self.config.message_length;
            for row in logits.data().chunks(l) {
                out.push(row.iter().map(|&z| sigmoid_f64(z as f64)).collect());
            }
            start = end;
        }
        Ok(out)
    }
}

pub fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn stack_images(images: &[ImageTensor]) -> Result<Tensor<f32>> {
    let first = images[0].tensor().shape();
    if images.iter().any(|im| im.tensor().shape() != first) {
        return Err(Error::Contract("images in a batch must share one size".into()));
    }
    Ok(Tensor::stack(&images.iter().map(ImageTensor::to_batch).collect::<Vec<_>>()))
}
