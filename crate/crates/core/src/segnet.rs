//! Toy encoder/decoder segmentation network.
//!
//! Encoder: four 3×3 conv + ReLU blocks with strides 1, 2, 1, 2 and widths
//! 16, 32, 32, 64, reducing resolution by 4. Decoder: four parallel 3×3
//! dilated conv + ReLU branches (rates 1, 2, 4, 8) summed together, then a
//! 1×1 classifier and bilinear upsampling back to the input resolution.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `(in channels, out channels, stride)` of the encoder blocks L1..L4.
pub const ENCODER_BLOCKS: [(usize, usize, usize); 4] = [(3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)];
pub const DILATION_RATES: [usize; 4] = [1, 2, 4, 8];
pub const FEATURE_CHANNELS: usize = 64;
pub const DOWNSAMPLE: usize = 4;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FreezePolicy {
    #[default]
    None,
    /// The whole encoder is fixed.
    EncoderFrozen,
    /// Encoder blocks L1 and L2 are fixed, L3 and L4 stay trainable.
    FirstTwoLayersFrozen,
}

impl FreezePolicy {
    /// Number of leading encoder blocks held fixed.
    pub fn frozen_blocks(self) -> usize {
        match self {
            FreezePolicy::None => 0,
            FreezePolicy::EncoderFrozen => ENCODER_BLOCKS.len(),
            FreezePolicy::FirstTwoLayersFrozen => 2,
        }
    }
}

impl FromStr for FreezePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FreezePolicy::None),
            "encoder" => Ok(FreezePolicy::EncoderFrozen),
            "first-two" => Ok(FreezePolicy::FirstTwoLayersFrozen),
            other => Err(Error::Param(format!(
                "unknown freeze policy {other:?} (expected none, encoder, first-two)"
            ))),
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FreezePolicy::None => "none",
            FreezePolicy::EncoderFrozen => "encoder",
            FreezePolicy::FirstTwoLayersFrozen => "first-two",
        })
    }
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct SegOutputs {
    /// Encoder output, `B × H/4 × W/4 × 64`.
    pub features: Var,
    /// Outputs of the four dilation branches.
    pub dilations: [Var; 4],
    /// Full resolution logits, `B × H × W × C`.
    pub logits: Var,
    /// Leaf handle for every parameter, in [`SegModel::params`] order.
    pub params: Vec<Var>,
}

/// Plain tensors produced by a gradient-free forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SegValues {
    pub features: Tensor<f32>,
    pub dilations: [Tensor<f32>; 4],
    pub logits: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    params: Vec<Param>,
    num_classes: usize,
}

/// Expected `(name, shape)` of every parameter for a given class count.
pub fn parameter_layout(num_classes: usize) -> Vec<(String, Vec<usize>)> {
    let mut layout = Vec::new();
    for (i, &(cin, cout, _)) in ENCODER_BLOCKS.iter().enumerate() {
        layout.push((format!("enc{}.weight", i + 1), vec![KERNEL, KERNEL, cin, cout]));
        layout.push((format!("enc{}.bias", i + 1), vec![cout]));
    }
    for i in 0..DILATION_RATES.len() {
        layout
            .push((format!("dec{}.weight", i + 1), vec![KERNEL, KERNEL, FEATURE_CHANNELS, FEATURE_CHANNELS]));
        layout.push((format!("dec{}.bias", i + 1), vec![FEATURE_CHANNELS]));
    }
    layout.push(("head.weight".into(), vec![1, 1, FEATURE_CHANNELS, num_classes]));
    layout.push(("head.bias".into(), vec![num_classes]));
    layout
}

impl SegModel {
    /// He-uniform (fan-in) weights, zero biases.
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        check_classes(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = parameter_layout(num_classes)
            .into_iter()
            .map(|(name, shape)| {
                let value = if shape.len() == 4 {
                    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
                    let bound = (6.0 / fan_in).sqrt() as f32;
                    Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
                } else {
                    Tensor::zeros(&shape)
                };
                Param { name, value, trainable: true }
            })
            .collect();
        Ok(SegModel { params, num_classes })
    }

    pub fn zeros(num_classes: usize) -> Result<Self> {
        check_classes(num_classes)?;
        let params = parameter_layout(num_classes)
            .into_iter()
            .map(|(name, shape)| Param { name, value: Tensor::zeros(&shape), trainable: true })
            .collect();
        Ok(SegModel { params, num_classes })
    }

    /// Rebuilds a model from named tensors, which must match
    /// [`parameter_layout`] exactly. All parameters come back trainable.
    pub fn from_named(num_classes: usize, tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        check_classes(num_classes)?;
        let layout = parameter_layout(num_classes);
        if layout.len() != tensors.len() {
            return Err(Error::Data(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                tensors.len()
            )));
        }
        let params = layout
            .into_iter()
            .zip(tensors)
            .map(|((name, shape), (got_name, value))| {
                if name != got_name || shape != value.shape() {
                    return Err(Error::Data(format!(
                        "expected parameter {name} {shape:?}, found {got_name} {:?}",
                        value.shape()
                    )));
                }
                Ok(Param { name, value, trainable: true })
            })
            .collect::<Result<_>>()?;
        Ok(SegModel { params, num_classes })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records a full forward pass on `tape`. Frozen parameters enter the
    /// tape as constants.
    pub fn forward(&self, tape: &mut Tape<f32>, input: Var) -> Result<SegOutputs> {
        let shape = tape.shape(input).to_vec();
        let [_, h, w, c] = shape[..] else {
            return Err(Error::shape("segnet.forward", format!("expected B×H×W×3, got {shape:?}")));
        };
        if c != ENCODER_BLOCKS[0].0 {
            return Err(Error::shape("segnet.forward", format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
            return Err(Error::shape(
                "segnet.forward",
                format!("spatial size {h}×{w} must be a positive multiple of {DOWNSAMPLE}"),
            ));
        }
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), p.trainable)).collect();

        let mut x = input;
        for (i, &(_, _, stride)) in ENCODER_BLOCKS.iter().enumerate() {
            x = tape.conv2d(x, vars[2 * i], vars[2 * i + 1], stride, 1, KERNEL / 2)?;
            x = tape.relu(x);
        }
        let features = x;

        let base = 2 * ENCODER_BLOCKS.len();
        let mut dilations = [features; 4];
        for (i, &rate) in DILATION_RATES.iter().enumerate() {
            let (wv, bv) = (vars[base + 2 * i], vars[base + 2 * i + 1]);
            let d = tape.conv2d(features, wv, bv, 1, rate, rate * (KERNEL / 2))?;
            dilations[i] = tape.relu(d);
        }
        let mut merged = dilations[0];
        for &d in &dilations[1..] {
            merged = tape.add(merged, d)?;
        }
        let head = base + 2 * DILATION_RATES.len();
        let coarse = tape.conv2d(merged, vars[head], vars[head + 1], 1, 1, 0)?;
        let logits = tape.bilinear_resize(coarse, h, w)?;
        Ok(SegOutputs { features, dilations, logits, params: vars })
    }

    /// Gradient-free forward pass.
    pub fn evaluate(&self, batch: &Tensor<f32>) -> Result<SegValues> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let frozen = self.clone_frozen();
        let out = frozen.forward(&mut tape, input)?;
        Ok(SegValues {
            features: tape.value(out.features).clone(),
            dilations: out.dilations.map(|d| tape.value(d).clone()),
            logits: tape.value(out.logits).clone(),
        })
    }

    fn clone_frozen(&self) -> SegModel {
        let mut m = self.clone();
        m.params.iter_mut().for_each(|p| p.trainable = false);
        m
    }

    /// Frozen deep copy used as the teacher.
    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot { model: Arc::new(self.clone_frozen()) }
    }

    /// Marks parameters trainable or fixed according to `policy`.
    pub fn apply_freeze(&mut self, policy: FreezePolicy) {
        let frozen = policy.frozen_blocks();
        for p in &mut self.params {
            p.trainable = encoder_block(&p.name).is_none_or(|b| b >= frozen);
        }
    }

    /// Returns a copy whose classifier has `added` extra output channels.
    /// Existing parameters are copied verbatim; new weights are drawn from
    /// N(0, 0.01²) and new biases set to −ln(C_new).
    pub fn extend_classifier(&self, added: usize, seed: u64) -> Result<SegModel> {
        if added == 0 {
            return Err(Error::Param("extend_classifier needs at least one new class".into()));
        }
        let old_c = self.num_classes;
        let new_c = old_c + added;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.01).expect("valid normal");
        let mut out = self.clone();
        for p in &mut out.params {
            match p.name.as_str() {
                "head.weight" => {
                    let old = p.value.data();
                    let mut data = Vec::with_capacity(FEATURE_CHANNELS * new_c);
                    for ci in 0..FEATURE_CHANNELS {
                        data.extend_from_slice(&old[ci * old_c..(ci + 1) * old_c]);
                        data.extend((0..added).map(|_| normal.sample(&mut rng)));
                    }
                    p.value = Tensor::new(vec![1, 1, FEATURE_CHANNELS, new_c], data)?;
                }
                "head.bias" => {
                    let mut data = p.value.data().to_vec();
                    data.extend(std::iter::repeat_n(-(new_c as f32).ln(), added));
                    p.value = Tensor::new(vec![new_c], data)?;
                }
                _ => {}
            }
        }
        out.num_classes = new_c;
        Ok(out)
    }
}

fn check_classes(num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::Param("model needs at least one class".into()));
    }
    Ok(())
}

/// Zero-based encoder block index for `encN.*` parameter names.
pub fn encoder_block(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("enc")?;
    let digit = rest.split('.').next()?.parse::<usize>().ok()?;
    Some(digit - 1)
}

/// Immutable copy of a model, used as the teacher during an incremental
/// step. Cheap to clone and shareable across threads.
#[derive(Clone, Debug)]
pub struct ModelSnapshot {
    model: Arc<SegModel>,
}

impl ModelSnapshot {
    pub fn num_classes(&self) -> usize {
        self.model.num_classes
    }

    pub fn model(&self) -> &SegModel {
        &self.model
    }

    pub fn forward(&self, batch: &Tensor<f32>) -> Result<SegValues> {
        self.model.evaluate(batch)
    }
}
