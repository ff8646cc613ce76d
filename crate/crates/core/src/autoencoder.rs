//! Variational autoencoders for volumes `(E, D)` and label maps `(E_l, D_l)`.
//!
//! Both share one convolutional architecture: a full-resolution stem, then
//! per level a stride-2 convolution and a mixing convolution; the decoder
//! mirrors it with nearest-neighbour upsampling. The volume decoder ends in
//! a sigmoid (outputs in `[0, 1]`, MSE loss); the label decoder emits
//! per-class logits trained with voxel-wise cross-entropy.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Grid3, LabelMap, Split, Volume, N_CLASSES};
use crate::error::{Error, Result};
use crate::nn::{checkpoint, collect_grads, AdamW, Array, Bound, Conv, ConvGeom, ParamSet, Tape, Var};
use crate::rng::{derive, normal_array};
use crate::train::{ensure_finite, BatchOrder, TrainLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeKind {
    Volume,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainParams {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub kind: AeKind,
    pub in_channels: usize,
    pub latent_channels: usize,
    pub downsample_levels: usize,
    pub base_width: usize,
    pub kl_weight: f64,
    pub train: AeTrainParams,
}

impl AutoencoderConfig {
    pub fn desk_volume() -> Self {
        Self {
            kind: AeKind::Volume,
            in_channels: 1,
            latent_channels: 4,
            downsample_levels: 2,
            base_width: 16,
            kl_weight: 1e-6,
            train: AeTrainParams {
                lr: 2e-3,
                batch_size: 4,
                steps: 400,
                seed: 11,
            },
        }
    }

    pub fn desk_label() -> Self {
        Self {
            kind: AeKind::Label,
            in_channels: N_CLASSES,
            train: AeTrainParams {
                seed: 12,
                ..Self::desk_volume().train
            },
            ..Self::desk_volume()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = match self.kind {
            AeKind::Volume => 1,
            AeKind::Label => N_CLASSES,
        };
        if self.in_channels != expect {
            return Err(Error::Config(format!(
                "{:?} autoencoder needs in_channels = {expect}, got {}",
                self.kind, self.in_channels
            )));
        }
        if self.latent_channels == 0 || self.base_width == 0 || self.downsample_levels == 0 {
            return Err(Error::Config("latent_channels, base_width, downsample_levels must be >= 1".into()));
        }
        if !(self.kl_weight >= 0.0) || self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("kl_weight >= 0, lr > 0 and batch_size >= 1 required".into()));
        }
        Ok(())
    }

    pub fn factor(&self) -> usize {
        1 << self.downsample_levels
    }

    /// Latent shape `(c, h, w, d)` for a given grid, if divisible.
    pub fn latent_shape(&self, grid: [usize; 3]) -> Result<[usize; 4]> {
        let f = self.factor();
        if grid.iter().any(|&g| g % f != 0 || g == 0) {
            return Err(Error::Shape(format!(
                "grid {grid:?} is not divisible by 2^{} = {f}",
                self.downsample_levels
            )));
        }
        Ok([self.latent_channels, grid[0] / f, grid[1] / f, grid[2] / f])
    }

    fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.base_width
        } else {
            2 * self.base_width
        }
    }
}

/// Encoder output `(c, h, w, d)` together with the grid it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub data: Array<f32>,
    pub source_shape: [usize; 3],
}

impl LatentGrid {
    pub fn shape(&self) -> [usize; 4] {
        let s = self.data.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

/// Channel-first one-hot encoding of a label map, `(N_CLASSES, H, W, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEncoding {
    pub one_hot: Array<f32>,
}

pub fn label_to_continuous(l: &LabelMap) -> Result<LabelEncoding> {
    let [h, w, d] = l.shape();
    let vox = h * w * d;
    let mut one_hot = Array::zeros(&[N_CLASSES, h, w, d]);
    for (v, &c) in l.data().iter().enumerate() {
        if c as usize >= N_CLASSES {
            return Err(Error::Input(format!("class {c} >= {N_CLASSES}")));
        }
        one_hot.data_mut()[c as usize * vox + v] = 1.0;
    }
    Ok(LabelEncoding { one_hot })
}

/// Per-voxel argmax over the leading channel axis; ties go to the lowest class.
pub fn continuous_to_label(channels: &Array<f32>) -> Result<LabelMap> {
    let s = channels.shape();
    if s.len() != 4 || s[0] == 0 || s[0] > N_CLASSES {
        return Err(Error::Shape(format!("expected (classes <= {N_CLASSES}, H, W, D), got {s:?}")));
    }
    let (k, vox) = (s[0], s[1] * s[2] * s[3]);
    let x = channels.data();
    let labels = (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if x[c * vox + v] > x[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(Grid3::new([s[1], s[2], s[3]], labels)?)
}

/// Analytic `KL(N(μ, e^logvar) ‖ N(0, 1))`, averaged over elements.
pub fn kl_divergence(mean: &Array<f32>, logvar: &Array<f32>) -> f64 {
    let n = mean.len() as f64;
    mean.data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .sum::<f64>()
        / n
}

struct Encoder {
    stem: Conv,
    levels: Vec<(Conv, Conv)>,
    head: Conv,
}

struct Decoder {
    stem: Conv,
    levels: Vec<Conv>,
    head: Conv,
}

pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: ParamSet<f32>,
    encoder: Encoder,
    decoder: Decoder,
}

/// Training inputs for one autoencoder.
pub enum AeInputs<'a> {
    Volumes(&'a [Volume]),
    Labels(&'a [LabelMap]),
}

impl AeInputs<'_> {
    fn len(&self) -> usize {
        match self {
            AeInputs::Volumes(v) => v.len(),
            AeInputs::Labels(l) => l.len(),
        }
    }
}

pub(crate) fn volume_batch(vols: &[&Volume]) -> Array<f32> {
    let [h, w, d] = vols[0].shape();
    let mut data = Vec::with_capacity(vols.len() * h * w * d);
    for v in vols {
        data.extend_from_slice(v.data());
    }
    Array::from_vec(&[vols.len(), 1, h, w, d], data)
}

pub(crate) fn label_batch(labels: &[&LabelMap]) -> Result<(Array<f32>, Vec<u8>)> {
    let [h, w, d] = labels[0].shape();
    let mut data = Vec::with_capacity(labels.len() * N_CLASSES * h * w * d);
    let mut targets = Vec::with_capacity(labels.len() * h * w * d);
    for l in labels {
        data.extend_from_slice(label_to_continuous(l)?.one_hot.data());
        targets.extend_from_slice(l.data());
    }
    Ok((Array::from_vec(&[labels.len(), N_CLASSES, h, w, d], data), targets))
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derive(config.train.seed, "autoencoder-init");
        let mut ps = ParamSet::new();
        let k3 = ConvGeom::cube(3, 1);
        let levels = config.downsample_levels;
        let stem = Conv::new(&mut ps, &mut rng, "enc.stem", config.in_channels, config.width(0), k3);
        let enc_levels = (0..levels)
            .map(|i| {
                let (a, b) = (config.width(i), config.width(i + 1));
                (
                    Conv::new(&mut ps, &mut rng, &format!("enc.down{i}"), a, b, ConvGeom::cube(3, 2)),
                    Conv::new(&mut ps, &mut rng, &format!("enc.mix{i}"), b, b, k3),
                )
            })
            .collect();
        let head = Conv::new(&mut ps, &mut rng, "enc.head", config.width(levels), 2 * config.latent_channels, k3);
        let dstem = Conv::new(&mut ps, &mut rng, "dec.stem", config.latent_channels, config.width(levels), k3);
        let dec_levels = (0..levels)
            .rev()
            .map(|i| Conv::new(&mut ps, &mut rng, &format!("dec.mix{i}"), config.width(i + 1), config.width(i), k3))
            .collect();
        let out_channels = match config.kind {
            AeKind::Volume => 1,
            AeKind::Label => N_CLASSES,
        };
        let dhead = Conv::new(&mut ps, &mut rng, "dec.head", config.width(0), out_channels, k3);
        Ok(Self {
            config,
            params: ps,
            encoder: Encoder {
                stem,
                levels: enc_levels,
                head,
            },
            decoder: Decoder {
                stem: dstem,
                levels: dec_levels,
                head: dhead,
            },
        })
    }

    pub fn out_channels(&self) -> usize {
        match self.config.kind {
            AeKind::Volume => 1,
            AeKind::Label => N_CLASSES,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "encoder expects [n, {}, H, W, D], got {shape:?}",
                self.config.in_channels
            )));
        }
        self.config.latent_shape([shape[2], shape[3], shape[4]]).map(|_| ())
    }

    /// `(mean, logvar)` graph nodes for a `[n, in, H, W, D]` batch.
    pub fn encode_graph<'t>(&self, p: &Bound<'t, f32>, x: Var<'t, f32>) -> (Var<'t, f32>, Var<'t, f32>) {
        let e = &self.encoder;
        let mut h = e.stem.forward(p, x).silu();
        for (down, mix) in &e.levels {
            h = down.forward(p, h).silu();
            h = mix.forward(p, h).silu();
        }
        let out = e.head.forward(p, h);
        let l = self.config.latent_channels;
        (out.channel_slice(0, l), out.channel_slice(l, l).clamp(-30.0, 20.0))
    }

    /// Decoder graph; returns probabilities (volume) or logits (label).
    pub fn decode_graph<'t>(&self, p: &Bound<'t, f32>, z: Var<'t, f32>) -> Var<'t, f32> {
        let d = &self.decoder;
        let mut h = d.stem.forward(p, z).silu();
        for mix in &d.levels {
            h = mix.forward(p, h).silu().upsample2();
        }
        let out = d.head.forward(p, h);
        match self.config.kind {
            AeKind::Volume => out.sigmoid(),
            AeKind::Label => out,
        }
    }

    /// Posterior parameters for a batch `[n, in, H, W, D]`.
    pub fn encode_batch(&self, x: Array<f32>) -> Result<(Array<f32>, Array<f32>)> {
        self.check_input(x.shape())?;
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let (m, lv) = self.encode_graph(&p, tape.constant(x));
        Ok(((*m.value()).clone(), (*lv.value()).clone()))
    }

    /// Encodes one sample given as `(in_channels, H, W, D)`.
    pub fn encode(&self, x: &Array<f32>) -> Result<(LatentGrid, LatentGrid)> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!("expected (C, H, W, D), got {s:?}")));
        }
        let source_shape = [s[1], s[2], s[3]];
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(s);
        let (m, lv) = self.encode_batch(x.clone().reshape(&batch_shape))?;
        let strip = |a: Array<f32>| {
            let shape = a.shape()[1..].to_vec();
            LatentGrid {
                data: a.reshape(&shape),
                source_shape,
            }
        };
        Ok((strip(m), strip(lv)))
    }

    pub fn encode_volume(&self, v: &Volume) -> Result<(LatentGrid, LatentGrid)> {
        if self.config.kind != AeKind::Volume {
            return Err(Error::Shape("volume given to a label autoencoder".into()));
        }
        let [h, w, d] = v.shape();
        self.encode(&Array::from_vec(&[1, h, w, d], v.data().to_vec()))
    }

    pub fn encode_labels(&self, l: &LabelMap) -> Result<(LatentGrid, LatentGrid)> {
        if self.config.kind != AeKind::Label {
            return Err(Error::Shape("label map given to a volume autoencoder".into()));
        }
        self.encode(&label_to_continuous(l)?.one_hot)
    }

    /// Decodes a batch of latents `[n, c, h, w, d]`.
    pub fn decode_batch(&self, z: Array<f32>) -> Result<Array<f32>> {
        let s = z.shape();
        if s.len() != 5 || s[1] != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "decoder expects [n, {}, h, w, d], got {s:?}",
                self.config.latent_channels
            )));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let out = self.decode_graph(&p, tape.constant(z));
        Ok((*out.value()).clone())
    }

    /// Decodes one latent to `(out_channels, H, W, D)`.
    pub fn decode(&self, z: &LatentGrid) -> Result<Array<f32>> {
        let s = z.data.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("latent must be (c, h, w, d), got {s:?}")));
        }
        let f = self.config.factor();
        if z.source_shape != [s[1] * f, s[2] * f, s[3] * f] {
            return Err(Error::Shape(format!(
                "latent spatial {:?} does not match source {:?} at factor {f}",
                &s[1..],
                z.source_shape
            )));
        }
        let mut batch_shape = vec![1];
        batch_shape.extend_from_slice(&s);
        let out = self.decode_batch(z.data.clone().reshape(&batch_shape))?;
        let shape = out.shape()[1..].to_vec();
        Ok(out.reshape(&shape))
    }

    pub fn decode_volume(&self, z: &LatentGrid) -> Result<Volume> {
        let out = self.decode(z)?;
        let [h, w, d] = z.source_shape;
        // Sigmoid saturates to exactly 0.0 / 1.0 in f32 at worst, so the range check holds.
        Volume::new(Grid3::new([h, w, d], out.into_vec())?)
    }

    /// Softmax class probabilities `(N_CLASSES, H, W, D)` from the label decoder.
    pub fn decode_label_probs(&self, z: &LatentGrid) -> Result<Array<f32>> {
        if self.config.kind != AeKind::Label {
            return Err(Error::Shape("label decoding requested from a volume autoencoder".into()));
        }
        let logits = self.decode(z)?;
        let s = logits.shape().to_vec();
        let mut bs = vec![1];
        bs.extend_from_slice(&s);
        Ok(crate::nn::softmax_channels(&logits.reshape(&bs)).reshape(&s))
    }

    fn batch_inputs(&self, inputs: &AeInputs<'_>, idx: &[usize]) -> Result<(Array<f32>, Option<Arc<Vec<u8>>>)> {
        match inputs {
            AeInputs::Volumes(v) => {
                let sel: Vec<&Volume> = idx.iter().map(|&i| &v[i]).collect();
                Ok((volume_batch(&sel), None))
            }
            AeInputs::Labels(l) => {
                let sel: Vec<&LabelMap> = idx.iter().map(|&i| &l[i]).collect();
                let (x, t) = label_batch(&sel)?;
                Ok((x, Some(Arc::new(t))))
            }
        }
    }

    fn reconstruction<'t>(&self, out: Var<'t, f32>, x: Var<'t, f32>, targets: &Option<Arc<Vec<u8>>>) -> Var<'t, f32> {
        match targets {
            None => out.mse(x),
            Some(t) => out.cross_entropy(t.clone()),
        }
    }

    /// Reconstruction term of the posterior-mean decode, averaged over `inputs`.
    pub fn reconstruction_loss(&self, inputs: &AeInputs<'_>) -> Result<f64> {
        let n = inputs.len();
        let mut total = 0.0;
        for i in 0..n {
            let (x, t) = self.batch_inputs(inputs, &[i])?;
            let tape = Tape::new();
            let p = self.params.bind(&tape, false);
            let xv = tape.constant(x);
            let (m, _) = self.encode_graph(&p, xv);
            let out = self.decode_graph(&p, m);
            total += self.reconstruction(out, xv, &t).value().item() as f64;
        }
        Ok(total / n as f64)
    }

    /// Trains in place for `config.train.steps` steps.
    ///
    /// Log columns: `step, loss, recon, kl`. The loss is
    /// `recon + kl_weight · KL` with a reparameterized latent sample.
    pub fn fit(&mut self, inputs: &AeInputs<'_>, stage: &str) -> Result<TrainLog> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::Input("autoencoder training set is empty".into()));
        }
        if let AeInputs::Volumes(v) = inputs {
            self.check_input(&[1, 1, v[0].shape()[0], v[0].shape()[1], v[0].shape()[2]])?;
        }
        let tp = self.config.train.clone();
        let mut rng = derive(tp.seed, "autoencoder-train");
        let mut order = BatchOrder::new(n);
        let mut opt = AdamW::new(tp.lr);
        let mut log = TrainLog::new(&["step", "loss", "recon", "kl"]);
        let kl_w = self.config.kl_weight as f32;
        for step in 0..tp.steps {
            let idx = order.next_batch(tp.batch_size, &mut rng);
            let (x, targets) = self.batch_inputs(inputs, &idx)?;
            self.check_input(x.shape())?;
            let tape = Tape::new();
            let p = self.params.bind(&tape, true);
            let xv = tape.constant(x);
            let (mean, logvar) = self.encode_graph(&p, xv);
            let eps = tape.constant(normal_array(&mut rng, &mean.shape()));
            let z = mean.add(logvar.scale(0.5).exp().mul(eps));
            let out = self.decode_graph(&p, z);
            let recon = self.reconstruction(out, xv, &targets);
            let kl = mean.mul(mean).add(logvar.exp()).sub(logvar).add_scalar(-1.0).mean().scale(0.5);
            let loss = recon.add(kl.scale(kl_w));
            let (lv, rv, kv) = (loss.value().item() as f64, recon.value().item() as f64, kl.value().item() as f64);
            ensure_finite(lv, stage, step)?;
            log.push(vec![step as f64, lv, rv, kv]);
            let mut g = tape.backward(loss);
            let grads = collect_grads(&p, &mut g);
            drop(p);
            opt.step(&mut self.params, &grads);
        }
        Ok(log)
    }

    pub fn save(&self, dir: &Path, stem: &str, meta: serde_json::Value) -> Result<()> {
        checkpoint::save(dir, stem, &self.params, &self.config, meta)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let loaded = checkpoint::load(dir, stem)?;
        let mut ae = Self::new(loaded.config()?)?;
        loaded.restore_into(&mut ae.params)?;
        Ok(ae)
    }
}

/// Trains an autoencoder of `cfg.kind` on the train split of `manifest`.
pub fn train_autoencoder(manifest: &DatasetManifest, cfg: &AutoencoderConfig) -> Result<(Autoencoder, TrainLog)> {
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(Error::Input("manifest has no training items".into()));
    }
    let mut ae = Autoencoder::new(cfg.clone())?;
    let stage = match cfg.kind {
        AeKind::Volume => "vae-vol",
        AeKind::Label => "vae-label",
    };
    let log = match cfg.kind {
        AeKind::Volume => {
            let vols = train.iter().map(|e| manifest.load_volume(e)).collect::<Result<Vec<_>>>()?;
            ae.fit(&AeInputs::Volumes(&vols), stage)?
        }
        AeKind::Label => {
            let labels = train.iter().map(|e| manifest.load_labels(e)).collect::<Result<Vec<_>>>()?;
            ae.fit(&AeInputs::Labels(&labels), stage)?
        }
    };
    Ok((ae, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_phantom, PhantomSpec};
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn small(kind: AeKind) -> AutoencoderConfig {
        let base = match kind {
            AeKind::Volume => AutoencoderConfig::desk_volume(),
            AeKind::Label => AutoencoderConfig::desk_label(),
        };
        AutoencoderConfig { base_width: 4, ..base }
    }

    #[test]
    fn latent_shapes_follow_downsampling() {
        let cfg = AutoencoderConfig::desk_volume();
        assert_eq!(cfg.latent_shape([32, 32, 16]).unwrap(), [4, 8, 8, 4]);
        assert_eq!(cfg.latent_shape([160, 160, 64]).unwrap(), [4, 40, 40, 16]);
        assert!(cfg.latent_shape([30, 32, 16]).is_err());
    }

    #[test]
    fn encode_decode_shapes_and_range() {
        let ae = Autoencoder::new(small(AeKind::Volume)).unwrap();
        let (v, _) = generate_phantom(1, &PhantomSpec::desk()).unwrap();
        let (m, lv) = ae.encode_volume(&v).unwrap();
        assert_eq!(m.shape(), [4, 8, 8, 4]);
        assert_eq!(lv.shape(), [4, 8, 8, 4]);
        assert_eq!(ae.encode_volume(&v).unwrap().0, m);
        let z = LatentGrid {
            data: normal_array(&mut seeded(3), &[4, 8, 8, 4]).map(|x: f32| x * 5.0),
            source_shape: [32, 32, 16],
        };
        let out = ae.decode_volume(&z).unwrap();
        assert_eq!(out.shape(), [32, 32, 16]);
        assert!(out.data().iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let ae = Autoencoder::new(small(AeKind::Volume)).unwrap();
        assert!(ae.encode(&Array::zeros(&[1, 30, 32, 16])).is_err());
        assert!(ae.encode(&Array::zeros(&[2, 32, 32, 16])).is_err());
        let z = LatentGrid {
            data: Array::zeros(&[3, 8, 8, 4]),
            source_shape: [32, 32, 16],
        };
        assert!(ae.decode(&z).is_err());
        let bad = AutoencoderConfig {
            in_channels: 3,
            ..small(AeKind::Label)
        };
        assert!(Autoencoder::new(bad).is_err());
    }

    #[test]
    fn one_hot_examples() {
        let mut g = Grid3::filled([2, 2, 1], 0u8);
        g.set(1, 0, 0, 3);
        let l = LabelMap::new(g).unwrap();
        let e = label_to_continuous(&l).unwrap();
        assert_eq!(e.one_hot.shape(), &[5, 2, 2, 1]);
        let at = |c: usize, v: usize| e.one_hot.data()[c * 4 + v];
        assert_eq!((0..5).map(|c| at(c, 2)).collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(at(0, 0), 1.0);
        let bg = LabelMap::new(Grid3::filled([2, 2, 2], 0)).unwrap();
        assert!(label_to_continuous(&bg).unwrap().one_hot.data()[..8].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn argmax_examples_and_tie_break() {
        let two = Array::from_vec(&[2, 1, 1, 1], vec![0.1, 0.9]);
        assert_eq!(continuous_to_label(&two).unwrap().data(), &[1]);
        let tie = Array::from_vec(&[2, 1, 1, 1], vec![0.5, 0.5]);
        assert_eq!(continuous_to_label(&tie).unwrap().data(), &[0]);
    }

    #[test]
    fn kl_is_zero_at_standard_normal() {
        let z = Array::zeros(&[4, 2, 2, 2]);
        assert_eq!(kl_divergence(&z, &z), 0.0);
        let m = Array::full(&[3], 0.5);
        assert!(kl_divergence(&m, &Array::full(&[3], -0.3)) > 0.0);
    }

    #[test]
    fn zero_kl_weight_loss_is_pure_reconstruction() {
        let mut cfg = small(AeKind::Volume);
        cfg.kl_weight = 0.0;
        cfg.train.steps = 3;
        let mut ae = Autoencoder::new(cfg).unwrap();
        let vols: Vec<Volume> = (0..2).map(|s| generate_phantom(s, &PhantomSpec::desk()).unwrap().0).collect();
        let log = ae.fit(&AeInputs::Volumes(&vols), "test").unwrap();
        assert_eq!(log.column("loss"), log.column("recon"));
    }

    #[test]
    fn label_training_is_deterministic_and_learns() {
        let mut cfg = small(AeKind::Label);
        cfg.train.steps = 40;
        cfg.train.batch_size = 2;
        let labels: Vec<LabelMap> = (0..2).map(|s| generate_phantom(s, &PhantomSpec::desk()).unwrap().1).collect();
        let mut a = Autoencoder::new(cfg.clone()).unwrap();
        let mut b = Autoencoder::new(cfg).unwrap();
        let la = a.fit(&AeInputs::Labels(&labels), "t").unwrap();
        let lb = b.fit(&AeInputs::Labels(&labels), "t").unwrap();
        assert_eq!(la.to_csv(), lb.to_csv());
        assert_eq!(a.params.checksum(), b.params.checksum());
        let r = la.column("recon").unwrap();
        assert!(r.last().unwrap() < &r[0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn one_hot_round_trips(seed in 0u64..u64::MAX) {
            let mut rng = seeded(seed);
            let data: Vec<u8> = (0..3 * 4 * 2).map(|_| rng.random_range(0..5u8)).collect();
            let l = LabelMap::new(Grid3::new([3, 4, 2], data).unwrap()).unwrap();
            let e = label_to_continuous(&l).unwrap();
            for v in 0..24 {
                let s: f32 = (0..5).map(|c| e.one_hot.data()[c * 24 + v]).sum();
                prop_assert_eq!(s, 1.0);
            }
            prop_assert_eq!(continuous_to_label(&e.one_hot).unwrap(), l);
        }

        #[test]
        fn kl_is_nonnegative(m in -5f32..5.0, lv in -8f32..8.0) {
            prop_assert!(kl_divergence(&Array::full(&[1], m), &Array::full(&[1], lv)) >= 0.0);
        }
    }
}
