//! The full recognizer: backbone, sequence head, CTC classifier and the
//! optional training-only guidance branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{make_config, Backbone, BackboneConfig, FeatureMap, Variant};
use crate::error::{Error, Result};
use crate::frm::{SequenceHead, SequenceOutput, Sequencer};
use crate::nn::{Builder, Linear, ParamStore};
use crate::sgm::{Sgm, SgmConfig, SgmOutput, DEFAULT_WINDOW};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const SGM_PREFIX: &str = "sgm.";
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Charset size `N_c`; the CTC classifier has `N_c + 1` outputs.
    pub num_classes: usize,
    pub head: SequenceHead,
    pub sgm: bool,
    pub window: usize,
}

impl ModelConfig {
    pub fn new(variant: Variant, num_classes: usize) -> Self {
        ModelConfig {
            backbone: make_config(variant),
            num_classes,
            head: SequenceHead::Frm,
            sgm: false,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn variant(&self) -> Variant {
        self.backbone.variant
    }

    pub fn dim(&self) -> usize {
        self.backbone.dims[2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub features: FeatureMap,
    pub sequence: SequenceOutput,
    /// Raw CTC logits `[B, W/4, N_c + 1]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SvtrV2 {
    pub config: ModelConfig,
    backbone: Backbone,
    sequencer: Sequencer,
    ctc: Linear,
    sgm: Option<Sgm>,
}

impl SvtrV2 {
    /// Binds the model to `store`, creating any missing parameters from
    /// `rng`. Existing parameters (matched by name) are reused.
    pub fn build<T: Scalar>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.num_classes == 0 {
            return Err(Error::Config("charset must be nonempty".into()));
        }
        let mut bld = Builder::new(store, rng);
        let d = config.dim();
        let heads = config.backbone.heads[2];
        let ratio = config.backbone.mlp_ratio;
        let backbone = Backbone::new(&mut bld, "backbone", config.backbone.clone())?;
        let sequencer = Sequencer::new(&mut bld, "frm", config.head, d, heads, ratio)?;
        let ctc = Linear::new(&mut bld, "ctc", d, config.num_classes + 1, false)?;
        let sgm = if config.sgm {
            let sc = SgmConfig {
                window: config.window,
                num_classes: config.num_classes,
            };
            Some(Sgm::new(&mut bld, "sgm", sc, d)?)
        } else {
            None
        };
        Ok(SvtrV2 {
            config,
            backbone,
            sequencer,
            ctc,
            sgm,
        })
    }

    pub fn init<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::build(config, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn has_sgm(&self) -> bool {
        self.sgm.is_some()
    }

    /// `images`: `[B, H, W, 3]` on the tape, values in `[0, 1]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, images: Var) -> Result<Forward> {
        let x = normalize_input(tape, images)?;
        let features = self.backbone.forward(tape, store, x)?;
        let sequence = self.sequencer.forward(tape, store, &features)?;
        let logits = self.ctc.forward(tape, store, sequence.seq)?;
        Ok(Forward {
            features,
            sequence,
            logits,
        })
    }

    pub fn sgm_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        features: &FeatureMap,
        labels: &[Vec<usize>],
    ) -> Result<SgmOutput> {
        match &self.sgm {
            Some(sgm) => sgm.loss(tape, store, features, labels),
            None => Err(Error::Mode {
                mode: "inference",
                what: "the guidance branch is not present".into(),
            }),
        }
    }

    /// CTC logits for a batch of equally sized `[3, H, W]` images.
    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images_to_batch(images)?);
        let out = self.forward(&mut tape, store, x)?;
        Ok(tape.value(out.logits))
    }

    /// Drops the guidance branch and its parameters.
    pub fn strip_for_inference<T: Scalar>(&self, store: &ParamStore<T>) -> Result<(SvtrV2, ParamStore<T>)> {
        let mut config = self.config.clone();
        config.sgm = false;
        let mut stripped = store.without_prefix(SGM_PREFIX);
        let before = stripped.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SvtrV2::build(config, &mut stripped, &mut rng)?;
        if stripped.len() != before {
            return Err(Error::State(
                "store is missing parameters of the recognition branch".into(),
            ));
        }
        Ok((model, stripped))
    }
}

/// Maps `[0, 1]` pixels to `[-1, 1]` (mean 0.5, std 0.5 per channel).
pub fn normalize_input<T: Scalar>(tape: &mut Tape<T>, images: Var) -> Result<Var> {
    let c = *tape.shape(images).last().unwrap_or(&0);
    let x = tape.scale(images, T::from_f64(1.0 / INPUT_STD));
    let shift = tape.constant(Tensor::full(&[c], T::from_f64(-INPUT_MEAN / INPUT_STD)));
    tape.add_bias(x, shift)
}

/// Stacks `[3, H, W]` images into an NHWC batch `[B, H, W, 3]`.
pub fn images_to_batch<T: Scalar>(images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::Input("empty image batch".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("images must be [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut data = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.shape() != &s[..] {
            return Err(Error::dim("images_to_batch", &s, img.shape()));
        }
        let d = img.data();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    data.push(T::from_f64(d[(c * h + y) * w + x] as f64));
                }
            }
        }
    }
    Tensor::new(&[images.len(), h, w, 3], data)
}
