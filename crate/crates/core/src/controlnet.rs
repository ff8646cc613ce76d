//! Conditional denoiser `ε_θ(z_t, t, c)`: a frozen base U-Net plus a
//! trainable copy of its encoder that sees the condition. The copy's skip and
//! mid activations pass through zero-initialized pointwise convolutions and
//! are added to the matching activations of the base U-Net.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{label_to_continuous, AeKind, Autoencoder, LatentGrid};
use crate::data::LabelMap;
use crate::diffusion::{
    check_latents, draw_noise, gather, q_sample_batch, sample, Denoiser, LdmTrainParams, NoisePredictor,
    NoiseSchedule, Residuals, Sampler, UNetEncoder,
};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, collect_grads, AdamW, Array, Bound, Conv, ConvGeom, ParamSet, Tape, Var};
use crate::rng::derive;
use crate::train::{ensure_finite, BatchOrder, TrainLog};

const BRANCH: &str = "ctrl.";

/// A condition latent `(c, h, w, d)` aligned with the volume latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Condition {
    pub c: Array<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlNetConfig {
    /// Channels of the condition latent.
    pub hint_channels: usize,
    pub seed: u64,
}

pub struct ControlNet {
    pub config: ControlNetConfig,
    pub base: Denoiser,
    /// Trainable branch only; the base keeps its own parameter set.
    pub params: ParamSet<f32>,
    encoder: UNetEncoder,
    hint_proj: Conv,
    hint_zero: Conv,
    zero_skips: Vec<Conv>,
    zero_mid: Conv,
}

impl ControlNet {
    /// Branch initialized from the base encoder, fusion layers at zero.
    pub fn new(base: Denoiser, config: ControlNetConfig) -> Result<Self> {
        if config.hint_channels == 0 {
            return Err(Error::Config("hint_channels must be positive".into()));
        }
        let bc = base.config.clone();
        let mut rng = derive(config.seed, "controlnet-init");
        let mut ps = ParamSet::new();
        let encoder = UNetEncoder::new(&mut ps, &mut rng, BRANCH, &bc);
        for name in ps.names().to_vec() {
            let src = base
                .params
                .by_name(&name[BRANCH.len()..])
                .ok_or_else(|| Error::Shape(format!("base denoiser has no parameter for {name}")))?;
            ps.set_by_name(&name, src.clone());
        }
        let lc = bc.latent_channels;
        let hint_proj = if config.hint_channels == lc {
            Conv::identity(&mut ps, "ctrl.hint_proj", lc)
        } else {
            Conv::new(&mut ps, &mut rng, "ctrl.hint_proj", config.hint_channels, lc, ConvGeom::pointwise())
        };
        let hint_zero = Conv::zeros(&mut ps, "ctrl.hint_zero", lc, lc, ConvGeom::pointwise());
        let zero_skips = (0..bc.depth)
            .map(|i| Conv::zeros(&mut ps, &format!("ctrl.zero_skip{i}"), bc.width(i), bc.width(i), ConvGeom::pointwise()))
            .collect();
        let wl = bc.width(bc.depth - 1);
        let zero_mid = Conv::zeros(&mut ps, "ctrl.zero_mid", wl, wl, ConvGeom::pointwise());
        Ok(Self {
            config,
            base,
            params: ps,
            encoder,
            hint_proj,
            hint_zero,
            zero_skips,
            zero_mid,
        })
    }

    /// Names of the zero-initialized fusion parameters.
    pub fn fusion_parameter_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with("ctrl.zero_") || n.starts_with("ctrl.hint_zero"))
            .cloned()
            .collect()
    }

    fn forward<'t>(
        &self,
        pbase: &Bound<'t, f32>,
        pctrl: &Bound<'t, f32>,
        z: Var<'t, f32>,
        t: &[usize],
        c: Var<'t, f32>,
    ) -> Var<'t, f32> {
        let hint = self.hint_zero.forward(pctrl, self.hint_proj.forward(pctrl, c));
        let ctrl = self.encoder.forward(pctrl, z, t, Some(hint));
        let residuals = Residuals {
            skips: ctrl
                .skips
                .iter()
                .zip(&self.zero_skips)
                .map(|(&s, conv)| conv.forward(pctrl, s))
                .collect(),
            mid: self.zero_mid.forward(pctrl, ctrl.mid),
        };
        self.base.unet.forward(pbase, z, t, Some(&residuals))
    }

    fn check(&self, z_t: &Array<f32>, t: &[usize], c: &Array<f32>) -> Result<()> {
        self.base.config.check_latent(z_t.shape())?;
        let (zs, cs) = (z_t.shape(), c.shape());
        if cs.len() != 5 || cs[0] != zs[0] || cs[1] != self.config.hint_channels || cs[2..] != zs[2..] {
            return Err(Error::Shape(format!(
                "condition {cs:?} does not match latent {zs:?} with {} hint channels",
                self.config.hint_channels
            )));
        }
        if t.len() != zs[0] {
            return Err(Error::Shape(format!("{} timesteps for batch of {}", t.len(), zs[0])));
        }
        Ok(())
    }

    /// Batched prediction; `c` is `[n, hint_channels, h, w, d]`.
    pub fn predict_batch_conditional(&self, z_t: &Array<f32>, t: &[usize], c: &Array<f32>) -> Result<Array<f32>> {
        self.check(z_t, t, c)?;
        let tape = Tape::new();
        let pb = self.base.params.bind(&tape, false);
        let pc = self.params.bind(&tape, false);
        let out = self.forward(&pb, &pc, tape.constant(z_t.clone()), t, tape.constant(c.clone()));
        Ok((*out.value()).clone())
    }

    /// Single-latent form: `z_t` is `(c, h, w, d)`.
    pub fn predict_noise_conditional(&self, z_t: &Array<f32>, t: usize, c: &Condition) -> Result<Array<f32>> {
        let batch = |a: &Array<f32>| {
            let mut s = vec![1];
            s.extend_from_slice(a.shape());
            a.clone().reshape(&s)
        };
        Ok(self.predict_batch_conditional(&batch(z_t), &[t], &batch(&c.c))?.reshape(z_t.shape()))
    }

    /// Fixes a condition so the model can drive the generic samplers.
    pub fn with_condition<'a>(&'a self, c: &'a Condition) -> Conditioned<'a> {
        Conditioned { net: self, c }
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let meta = serde_json::json!({ "base_checksum": self.base.params.checksum(), "base_config": self.base.config });
        checkpoint::save(dir, stem, &self.params, &self.config, meta)
    }

    /// Restores a branch onto `base`, refusing a base that differs from the
    /// one the branch was trained against.
    pub fn load(dir: &Path, stem: &str, base: Denoiser) -> Result<Self> {
        let loaded = checkpoint::load(dir, stem)?;
        let want = loaded.index.meta.get("base_checksum").and_then(|v| v.as_str()).unwrap_or_default();
        if want != base.params.checksum() {
            return Err(Error::Format {
                path: dir.join(stem),
                message: "ControlNet branch was trained against a different base denoiser".into(),
            });
        }
        let mut net = Self::new(base, loaded.config()?)?;
        loaded.restore_into(&mut net.params)?;
        Ok(net)
    }
}

/// A [`ControlNet`] bound to one condition, broadcast over the batch.
pub struct Conditioned<'a> {
    net: &'a ControlNet,
    c: &'a Condition,
}

impl NoisePredictor for Conditioned<'_> {
    fn predict_batch(&self, z_t: &Array<f32>, t: &[usize]) -> Result<Array<f32>> {
        let n = z_t.shape().first().copied().unwrap_or(0);
        let c = Array::stack(&vec![&self.c.c; n]);
        self.net.predict_batch_conditional(z_t, t, &c)
    }
}

/// `z_l`: scaled posterior mean of the label encoder on a real label map.
pub fn encode_condition_from_real(l: &LabelMap, label_ae: &Autoencoder, scale: f32) -> Result<Condition> {
    if label_ae.config.kind != AeKind::Label {
        return Err(Error::Config("condition encoder must be a label autoencoder".into()));
    }
    let (mean, _) = label_ae.encode(&label_to_continuous(l)?.one_hot)?;
    Ok(Condition {
        c: mean.data.map(|x| x * scale),
    })
}

/// How a decoded label is turned back into encoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionInput {
    /// Softmax probabilities of the label decoder.
    Continuous,
    /// One-hot of the argmax label.
    Discrete,
}

/// Decodes a scaled label latent and re-encodes it into a condition.
///
/// `reencoder` must accept the label decoder's output channels; the
/// posterior mean is used and rescaled by `reencoder_scale`.
pub fn condition_from_label_latent(
    label_latent: &LatentGrid,
    label_scale: f32,
    label_ae: &Autoencoder,
    reencoder: &Autoencoder,
    reencoder_scale: f32,
    input: ConditionInput,
) -> Result<Condition> {
    if reencoder.config.in_channels != label_ae.out_channels() {
        return Err(Error::Shape(format!(
            "label decoder emits {} channels but the re-encoder takes {}",
            label_ae.out_channels(),
            reencoder.config.in_channels
        )));
    }
    let unscaled = LatentGrid {
        data: label_latent.data.map(|x| x / label_scale),
        source_shape: label_latent.source_shape,
    };
    let probs = label_ae.decode_label_probs(&unscaled)?;
    let x = match input {
        ConditionInput::Continuous => probs,
        ConditionInput::Discrete => label_to_continuous(&crate::autoencoder::continuous_to_label(&probs)?)?.one_hot,
    };
    let (mean, _) = reencoder.encode(&x)?;
    Ok(Condition {
        c: mean.data.map(|v| v * reencoder_scale),
    })
}

/// Samples a label latent with the label LDM and turns it into a condition.
/// Returns the condition and the sampled (scaled) label latent.
#[allow(clippy::too_many_arguments)]
pub fn encode_condition_from_synthetic(
    label_ldm: &Denoiser,
    schedule: &NoiseSchedule,
    label_ae: &Autoencoder,
    label_scale: f32,
    reencoder: &Autoencoder,
    reencoder_scale: f32,
    source_shape: [usize; 3],
    seed: u64,
    sampler: Sampler,
    input: ConditionInput,
) -> Result<(Condition, LatentGrid)> {
    let shape = label_ae.config.latent_shape(source_shape)?;
    let z = sample(label_ldm, schedule, &shape, seed, sampler)?;
    let latent = LatentGrid {
        data: z,
        source_shape,
    };
    let c = condition_from_label_latent(&latent, label_scale, label_ae, reencoder, reencoder_scale, input)?;
    Ok((c, latent))
}

/// Trains the branch on paired `(z_0, c)` with the base frozen.
///
/// Log columns: `step, loss`.
pub fn train_controlnet(
    volume_latents: &[Array<f32>],
    conditions: &[Condition],
    base: Denoiser,
    cfg: &ControlNetConfig,
    schedule: &NoiseSchedule,
    tp: &LdmTrainParams,
    stage: &str,
) -> Result<(ControlNet, TrainLog)> {
    check_latents(volume_latents)?;
    tp.validate()?;
    if conditions.len() != volume_latents.len() {
        return Err(Error::Input(format!(
            "{} latents but {} conditions",
            volume_latents.len(),
            conditions.len()
        )));
    }
    let cond: Vec<Array<f32>> = conditions.iter().map(|c| c.c.clone()).collect();
    check_latents(&cond)?;
    let mut net = ControlNet::new(base, cfg.clone())?;
    let mut rng = derive(tp.seed, "controlnet-train");
    let mut order = BatchOrder::new(volume_latents.len());
    let mut opt = AdamW::new(tp.lr).with_clip_norm(crate::diffusion::GRAD_CLIP_NORM);
    let mut log = TrainLog::new(&["step", "loss"]);
    for step in 0..tp.steps {
        let idx = order.next_batch(tp.batch_size, &mut rng);
        let z0 = gather(volume_latents, &idx);
        let c = gather(&cond, &idx);
        let (t, eps) = draw_noise(&mut rng, schedule, z0.shape());
        let zt = q_sample_batch(&z0, &t, &eps, schedule)?;
        net.check(&zt, &t, &c)?;
        let tape = Tape::new();
        let pb = net.base.params.bind(&tape, false);
        let pc = net.params.bind(&tape, true);
        let pred = net.forward(&pb, &pc, tape.constant(zt), &t, tape.constant(c));
        let loss = pred.mse(tape.constant(eps));
        let lv = loss.value().item() as f64;
        ensure_finite(lv, stage, step)?;
        log.push(vec![step as f64, lv]);
        let mut g = tape.backward(loss);
        let grads = collect_grads(&pc, &mut g);
        drop((pb, pc));
        opt.step(&mut net.params, &grads);
    }
    Ok((net, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{DenoiserConfig, ScheduleConfig};
    use crate::rng::{normal_array, seeded};

    fn trained_base() -> Denoiser {
        let mut d = Denoiser::new(DenoiserConfig {
            base_width: 4,
            ..DenoiserConfig::desk(2, 1)
        })
        .unwrap();
        let mut rng = seeded(5);
        for n in d.params.names().to_vec() {
            let shape = d.params.by_name(&n).unwrap().shape().to_vec();
            d.params.set_by_name(&n, normal_array::<f32>(&mut rng, &shape).map(|x| 0.2 * x));
        }
        d
    }

    #[test]
    fn zero_init_matches_base() {
        let base = trained_base();
        let net = ControlNet::new(base.clone(), ControlNetConfig { hint_channels: 3, seed: 0 }).unwrap();
        for n in net.fusion_parameter_names() {
            assert!(net.params.by_name(&n).unwrap().data().iter().all(|&x| x == 0.0), "{n}");
        }
        let mut rng = seeded(9);
        let z: Array<f32> = normal_array(&mut rng, &[2, 4, 4, 2]);
        let c = Condition {
            c: normal_array(&mut rng, &[3, 4, 4, 2]),
        };
        let a = net.predict_noise_conditional(&z, 7, &c).unwrap();
        let b = base.predict_noise(&z, 7).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-6);
        assert_ne!(a, Array::zeros(a.shape()));
    }

    #[test]
    fn branch_copies_base_encoder() {
        let base = trained_base();
        let net = ControlNet::new(base.clone(), ControlNetConfig { hint_channels: 2, seed: 0 }).unwrap();
        let copied = net.params.by_name("ctrl.enc.conv_in.weight").unwrap();
        assert_eq!(copied, base.params.by_name("enc.conv_in.weight").unwrap());
        let proj = net.params.by_name("ctrl.hint_proj.weight").unwrap();
        assert_eq!(proj.data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn condition_shape_is_checked() {
        let net = ControlNet::new(trained_base(), ControlNetConfig { hint_channels: 2, seed: 0 }).unwrap();
        let z = Array::zeros(&[2, 4, 4, 2]);
        let bad = Condition {
            c: Array::zeros(&[2, 4, 4, 4]),
        };
        assert!(net.predict_noise_conditional(&z, 1, &bad).is_err());
    }

    #[test]
    fn training_freezes_base_and_starts_at_base_loss() {
        let base = trained_base();
        let before = base.params.checksum();
        let mut rng = seeded(3);
        let latents: Vec<Array<f32>> = (0..4).map(|_| normal_array(&mut rng, &[2, 4, 4, 2])).collect();
        let conds: Vec<Condition> = (0..4)
            .map(|_| Condition {
                c: normal_array(&mut rng, &[2, 4, 4, 2]),
            })
            .collect();
        let s = ScheduleConfig::short(10).build().unwrap();
        let tp = LdmTrainParams {
            lr: 1e-3,
            batch_size: 2,
            steps: 3,
            seed: 4,
        };
        let cfg = ControlNetConfig { hint_channels: 2, seed: 0 };
        let (net, log) = train_controlnet(&latents, &conds, base.clone(), &cfg, &s, &tp, "t").unwrap();
        assert_eq!(net.base.params.checksum(), before);
        assert_ne!(net.params.checksum(), ControlNet::new(base.clone(), cfg).unwrap().params.checksum());
        // Replay the first batch through the frozen base alone.
        let mut rng = derive(tp.seed, "controlnet-train");
        let idx = BatchOrder::new(4).next_batch(2, &mut rng);
        let z0 = gather(&latents, &idx);
        let (t, eps) = draw_noise(&mut rng, &s, z0.shape());
        let zt = q_sample_batch(&z0, &t, &eps, &s).unwrap();
        let pred = base.predict_batch(&zt, &t).unwrap();
        assert!((log.rows[0][1] - crate::diffusion::mse(&pred, &eps)).abs() < 1e-5);
    }

    #[test]
    fn unpaired_data_is_rejected() {
        let s = ScheduleConfig::short(10).build().unwrap();
        let tp = LdmTrainParams {
            lr: 1e-3,
            batch_size: 2,
            steps: 1,
            seed: 4,
        };
        let latents = vec![Array::zeros(&[2, 4, 4, 2]); 2];
        let conds = vec![Condition {
            c: Array::zeros(&[2, 4, 4, 2]),
        }];
        let cfg = ControlNetConfig { hint_channels: 2, seed: 0 };
        assert!(train_controlnet(&latents, &conds, trained_base(), &cfg, &s, &tp, "t").is_err());
    }
}
