//! The two-pipeline model: a shared encoder feeding a softmax labeler
//! (classification pipeline) and a mirrored decoder (reconstruction
//! pipeline).

use crate::error::{Error, Result};
use crate::layers::{softmax, ConvLayer, ConvTransposeLayer, DenseLayer};
use crate::network::{Layer, NetworkSpec, Stack, StackGrads, Trace};
use crate::objective::{cross_entropy, squared_loss, LossValue};
use crate::optim::RmspropState;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which parameter group a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Encoder,
    Labeler,
    Decoder,
}

/// Shared encoder, labeler and (optionally) decoder parameters.
///
/// The encoder stack is stored once and read by both pipelines, so every
/// update from either pipeline lands in the same tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct DrcnModel {
    spec: NetworkSpec,
    p_keep: f64,
    encoder: Stack,
    labeler: Stack,
    decoder: Option<Stack>,
}

/// Gradients from one classification step.
#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub encoder: StackGrads,
    pub labeler: StackGrads,
}

/// Gradients from one reconstruction step.
#[derive(Debug, Clone)]
pub struct ReconstructionGrads {
    pub encoder: StackGrads,
    pub decoder: StackGrads,
}

fn build_encoder(spec: &NetworkSpec, p_keep: f64, rng: &mut Rng) -> Result<Stack> {
    let mut enc = Stack::new("enc");
    let mut channels = spec.input[0];
    for (i, st) in spec.conv.iter().enumerate() {
        let n = i + 1;
        enc.push(&format!("conv{n}"), Layer::Conv(ConvLayer::init(channels, st.channels, st.kernel, rng)?));
        enc.push(&format!("relu{n}"), Layer::Relu);
        if st.pool {
            enc.push(&format!("pool{n}"), Layer::MaxPool2);
        }
        channels = st.channels;
    }
    let [c, h, w] = spec.conv_output()?;
    enc.push("flatten", Layer::Flatten);
    let mut width = c * h * w;
    for (i, &out) in spec.fc.iter().enumerate() {
        let n = i + 4;
        enc.push(&format!("fc{n}"), Layer::Dense(DenseLayer::init(width, out, rng)?));
        enc.push(&format!("relu{n}"), Layer::Relu);
        enc.push(&format!("drop{n}"), Layer::Dropout(p_keep));
        width = out;
    }
    Ok(enc)
}

fn build_labeler(spec: &NetworkSpec, rng: &mut Rng) -> Result<Stack> {
    let mut lab = Stack::new("lab");
    lab.push("fc_out", Layer::Dense(DenseLayer::init(spec.fc[1], spec.classes, rng)?));
    Ok(lab)
}

/// Layerwise inverse of the encoder: transposed dense layers, unflatten,
/// then unpool-by-duplication and transposed convolutions in reverse order.
/// The final layer is linear.
fn build_decoder(spec: &NetworkSpec, rng: &mut Rng) -> Result<Stack> {
    let mut dec = Stack::new("dec");
    let [c, h, w] = spec.conv_output()?;
    let widths = [c * h * w, spec.fc[0], spec.fc[1]];
    for n in (0..spec.fc.len()).rev() {
        dec.push(
            &format!("fc{}t", n + 4),
            Layer::Dense(DenseLayer::init(widths[n + 1], widths[n], rng)?),
        );
        dec.push(&format!("relu_fc{}t", n + 4), Layer::Relu);
    }
    dec.push("unflatten", Layer::Unflatten([c, h, w]));
    for (i, st) in spec.conv.iter().enumerate().rev() {
        let n = i + 1;
        if st.pool {
            dec.push(&format!("unpool{n}"), Layer::Unpool2);
        }
        let out = if i == 0 { spec.input[0] } else { spec.conv[i - 1].channels };
        dec.push(
            &format!("deconv{n}"),
            Layer::ConvTranspose(ConvTransposeLayer::init(st.channels, out, st.kernel, rng)?),
        );
        if i > 0 {
            dec.push(&format!("relu_deconv{n}"), Layer::Relu);
        }
    }
    Ok(dec)
}

impl DrcnModel {
    /// Builds and He-initialises a model. Each parameter group draws from
    /// its own substream of `seed`, so a model without a decoder starts from
    /// exactly the same encoder and labeler as one with a decoder.
    pub fn build(spec: NetworkSpec, p_keep: f64, with_decoder: bool, seed: u64) -> Result<Self> {
        crate::layers::check_p_keep(p_keep)?;
        spec.encoder_shapes()?;
        let encoder = build_encoder(&spec, p_keep, &mut Rng::substream(seed, "init.encoder"))?;
        let labeler = build_labeler(&spec, &mut Rng::substream(seed, "init.labeler"))?;
        let decoder = if with_decoder {
            Some(build_decoder(&spec, &mut Rng::substream(seed, "init.decoder"))?)
        } else {
            None
        };
        let model = DrcnModel { spec, p_keep, encoder, labeler, decoder };
        if let Some(dec) = &model.decoder {
            let probe = Tensor::zeros(&model.batch_shape(1));
            let out = dec.infer(model.encoder.infer(probe.clone())?)?;
            if out.shape() != probe.shape() {
                return Err(Error::Build {
                    stage: "decoder".into(),
                    reason: format!("output {:?} does not match input {:?}", out.shape(), probe.shape()),
                });
            }
        }
        Ok(model)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn p_keep(&self) -> f64 {
        self.p_keep
    }

    pub fn has_decoder(&self) -> bool {
        self.decoder.is_some()
    }

    pub fn encoder(&self) -> &Stack {
        &self.encoder
    }

    pub fn labeler(&self) -> &Stack {
        &self.labeler
    }

    pub fn decoder(&self) -> Option<&Stack> {
        self.decoder.as_ref()
    }

    /// `[n, c, h, w]` for a batch of `n` inputs.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let [c, h, w] = self.spec.input;
        vec![n, c, h, w]
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 4 || batch.shape()[1..] != self.spec.input {
            return Err(Error::Dimension(format!(
                "model expects batches of shape [B, {}, {}, {}], got {:?}",
                self.spec.input[0],
                self.spec.input[1],
                self.spec.input[2],
                batch.shape()
            )));
        }
        Ok(())
    }

    fn require_decoder(&self) -> Result<&Stack> {
        self.decoder
            .as_ref()
            .ok_or_else(|| Error::Argument("model was built without a reconstruction pipeline".into()))
    }

    /// Class probabilities. Dropout is applied only when a training rng is
    /// supplied.
    pub fn forward_classify(&self, batch: &Tensor, dropout: Option<&mut Rng>) -> Result<Tensor> {
        self.check_batch(batch)?;
        let logits = match dropout {
            Some(rng) => {
                let (h, _) = self.encoder.forward(batch.clone(), Some(rng))?;
                self.labeler.infer(h)?
            }
            None => self.labeler.infer(self.encoder.infer(batch.clone())?)?,
        };
        softmax(&logits)
    }

    /// Evaluation-mode class probabilities.
    pub fn predict_proba(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_classify(batch, None)
    }

    /// Reconstructions with the same shape as the batch (linear output).
    pub fn forward_reconstruct(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let dec = self.require_decoder()?;
        dec.infer(self.encoder.infer(batch.clone())?)
    }

    /// Loss and gradients of the classification pipeline on one batch.
    pub fn classification_grads(
        &self,
        batch: &Tensor,
        onehot: &Tensor,
        dropout: Option<&mut Rng>,
    ) -> Result<(LossValue, ClassifierGrads)> {
        self.check_batch(batch)?;
        let (h, enc_trace) = self.encoder.forward(batch.clone(), dropout)?;
        let (logits, lab_trace) = self.labeler.forward(h, None)?;
        let (loss, g_logits) = cross_entropy(&softmax(&logits)?, onehot)?;
        let (g_h, labeler) = self.labeler.backward(lab_trace, g_logits, true)?;
        let g_h = g_h.expect("labeler input gradient requested");
        let (_, encoder) = self.encoder.backward(enc_trace, g_h, false)?;
        Ok((loss, ClassifierGrads { encoder, labeler }))
    }

    /// Loss of the classification pipeline without gradients.
    pub fn classification_loss(&self, batch: &Tensor, onehot: &Tensor, dropout: Option<&mut Rng>) -> Result<LossValue> {
        let probs = self.forward_classify(batch, dropout)?;
        Ok(cross_entropy(&probs, onehot)?.0)
    }

    /// Loss and gradients of the reconstruction pipeline mapping `noisy`
    /// towards `clean`.
    pub fn reconstruction_grads(&self, noisy: &Tensor, clean: &Tensor) -> Result<(LossValue, ReconstructionGrads)> {
        self.check_batch(noisy)?;
        let dec = self.require_decoder()?;
        let (h, enc_trace) = self.encoder.forward(noisy.clone(), None)?;
        let (recon, dec_trace) = dec.forward(h, None)?;
        let (loss, g_recon) = squared_loss(&recon, clean)?;
        let (g_h, decoder) = dec.backward(dec_trace, g_recon, true)?;
        let g_h = g_h.expect("decoder input gradient requested");
        let (_, encoder) = self.encoder.backward(enc_trace, g_h, false)?;
        Ok((loss, ReconstructionGrads { encoder, decoder }))
    }

    pub fn reconstruction_loss(&self, noisy: &Tensor, clean: &Tensor) -> Result<LossValue> {
        let recon = self.forward_reconstruct(noisy)?;
        Ok(squared_loss(&recon, clean)?.0)
    }

    /// Forward pass through the encoder keeping the activation trace, for
    /// kink detection in gradient checks.
    pub fn encoder_trace(&self, batch: &Tensor) -> Result<(Tensor, Trace)> {
        self.encoder.forward(batch.clone(), None)
    }

    /// Smallest distance to a ReLU or max-pool kink over both pipelines on
    /// `batch`; see [`Stack::kink_margin`].
    pub fn kink_margin(&self, batch: &Tensor) -> Result<f64> {
        self.check_batch(batch)?;
        let (h, enc) = self.encoder.kink_margin(batch.clone())?;
        let (_, lab) = self.labeler.kink_margin(h.clone())?;
        let dec = match &self.decoder {
            Some(d) => d.kink_margin(h)?.1,
            None => f64::INFINITY,
        };
        Ok(enc.min(lab).min(dec))
    }

    /// RMSprop step on Θ_c = {encoder, labeler}. Optimiser slots are laid out
    /// encoder-first, then labeler.
    pub fn apply_classifier_update(&mut self, grads: &ClassifierGrads, opt: &mut RmspropState, scale: f64) -> Result<()> {
        let mut slot = 0;
        step_stack(&mut self.encoder, &grads.encoder, opt, scale, &mut slot)?;
        step_stack(&mut self.labeler, &grads.labeler, opt, scale, &mut slot)
    }

    /// RMSprop step on Θ_r = {encoder, decoder}.
    pub fn apply_reconstruction_update(
        &mut self,
        grads: &ReconstructionGrads,
        opt: &mut RmspropState,
        scale: f64,
    ) -> Result<()> {
        let mut slot = 0;
        step_stack(&mut self.encoder, &grads.encoder, opt, scale, &mut slot)?;
        let dec = self
            .decoder
            .as_mut()
            .ok_or_else(|| Error::Argument("model was built without a reconstruction pipeline".into()))?;
        step_stack(dec, &grads.decoder, opt, scale, &mut slot)
    }

    /// Every parameter with its group and qualified name, in declaration
    /// order (encoder, labeler, decoder).
    pub fn named_params(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        let mut out: Vec<_> = self
            .encoder
            .params()
            .into_iter()
            .map(|(n, t)| (ParamGroup::Encoder, n, t))
            .collect();
        out.extend(self.labeler.params().into_iter().map(|(n, t)| (ParamGroup::Labeler, n, t)));
        if let Some(dec) = &self.decoder {
            out.extend(dec.params().into_iter().map(|(n, t)| (ParamGroup::Decoder, n, t)));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(ParamGroup, String, &mut Tensor)> {
        let mut out: Vec<_> = self
            .encoder
            .params_mut()
            .into_iter()
            .map(|(n, t)| (ParamGroup::Encoder, n, t))
            .collect();
        out.extend(self.labeler.params_mut().into_iter().map(|(n, t)| (ParamGroup::Labeler, n, t)));
        if let Some(dec) = &mut self.decoder {
            out.extend(dec.params_mut().into_iter().map(|(n, t)| (ParamGroup::Decoder, n, t)));
        }
        out
    }

    /// Copies of all tensors of one group, for bitwise comparisons.
    pub fn snapshot(&self, group: ParamGroup) -> Vec<Tensor> {
        self.named_params()
            .into_iter()
            .filter(|(g, _, _)| *g == group)
            .map(|(_, _, t)| t.clone())
            .collect()
    }

    /// Order-sensitive hash of the exact bit patterns of one group.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.snapshot(group) {
            for x in t.data() {
                for b in x.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

fn step_stack(stack: &mut Stack, grads: &StackGrads, opt: &mut RmspropState, scale: f64, slot: &mut usize) -> Result<()> {
    let params = stack.params_mut();
    if params.len() != grads.0.len() {
        return Err(Error::Dimension(format!(
            "{} gradients for {} parameters",
            grads.0.len(),
            params.len()
        )));
    }
    for ((name, param), grad) in params.into_iter().zip(&grads.0) {
        opt.step(*slot, &name, param, grad, scale)?;
        *slot += 1;
    }
    Ok(())
}
