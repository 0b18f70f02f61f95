//! Flat, named parameter storage plus the layout that maps network roles to entries.

use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Dimension, IxDyn, Ix1, Ix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ModelConfig;
use crate::scalar::Scalar;

/// Side of the square decoder convolution kernel.
pub const DEC_KERNEL: usize = 7;

pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<S> {
    /// Dotted path such as `col0.conv.kernel`.
    pub name: String,
    /// `false` for running statistics and class centers, which the optimizer never touches.
    pub trainable: bool,
    pub value: ArrayD<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn entries(&self) -> &[ParamEntry<S>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<S>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<S> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.entries[id].value
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<S>> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn v1(&self, id: ParamId) -> ArrayView1<'_, S> {
        self.entries[id].value.view().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn v2(&self, id: ParamId) -> ArrayView2<'_, S> {
        self.entries[id].value.view().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    pub fn m1(&mut self, id: ParamId) -> ArrayViewMut1<'_, S> {
        self.entries[id].value.view_mut().into_dimensionality::<Ix1>().expect("rank-1 parameter")
    }

    pub fn m2(&mut self, id: ParamId) -> ArrayViewMut2<'_, S> {
        self.entries[id].value.view_mut().into_dimensionality::<Ix2>().expect("rank-2 parameter")
    }

    /// Adds `grad` into entry `id`; shapes must agree.
    pub fn accumulate<D: Dimension>(&mut self, id: ParamId, grad: &ndarray::Array<S, D>) {
        let entry = &mut self.entries[id];
        assert_eq!(entry.value.shape(), grad.shape(), "gradient shape for {}", entry.name);
        let g = grad.view().into_dyn();
        entry.value += &g;
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    trainable: e.trainable,
                    value: ArrayD::zeros(e.value.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    trainable: e.trainable,
                    value: e.value.mapv(|v| T::lit(v.to_f64_lossy())),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmIds {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvIds {
    /// `(F, C·k)`
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn: BnIds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub w: ParamId,
    /// Scalar bias, stored with one element.
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderIds {
    pub lstm: LstmIds,
    pub bn_in: BnIds,
    /// `(F_dec, 7·7)`
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn_out: BnIds,
    /// 1×1 convolution to a single channel.
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ColumnIds {
    pub conv: Option<ConvIds>,
    pub lstm: Option<LstmIds>,
    pub attn: Option<AttnIds>,
    pub dec: DecoderIds,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub columns: Vec<ColumnIds>,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    /// Class centers `(K, fc_hidden)` for the center loss.
    pub centers: ParamId,
}

enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(3 / fan_in)`.
    FanIn(usize),
}

struct Builder<'r, S> {
    entries: Vec<ParamEntry<S>>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<S: Scalar> Builder<'_, S> {
    fn add(&mut self, name: String, shape: &[usize], init: Init, trainable: bool) -> ParamId {
        let value = match (init, self.rng.as_deref_mut()) {
            (Init::Ones, _) => ArrayD::from_elem(IxDyn(shape), S::one()),
            (Init::FanIn(fan), Some(rng)) => {
                let limit = (3.0 / fan.max(1) as f64).sqrt();
                ArrayD::from_shape_simple_fn(IxDyn(shape), || {
                    S::lit(rng.random_range(-limit..limit))
                })
            }
            _ => ArrayD::zeros(IxDyn(shape)),
        };
        self.entries.push(ParamEntry {
            name,
            trainable,
            value,
        });
        self.entries.len() - 1
    }

    fn bn(&mut self, prefix: &str, channels: usize) -> BnIds {
        BnIds {
            gamma: self.add(format!("{prefix}.gamma"), &[channels], Init::Ones, true),
            beta: self.add(format!("{prefix}.beta"), &[channels], Init::Zeros, true),
            mean: self.add(format!("{prefix}.running_mean"), &[channels], Init::Zeros, false),
            var: self.add(format!("{prefix}.running_var"), &[channels], Init::Ones, false),
        }
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> LstmIds {
        LstmIds {
            w: self.add(format!("{prefix}.w"), &[input, 4 * hidden], Init::FanIn(input), true),
            u: self.add(format!("{prefix}.u"), &[hidden, 4 * hidden], Init::FanIn(hidden), true),
            b: self.add(format!("{prefix}.b"), &[4 * hidden], Init::Zeros, true),
        }
    }
}

fn build<S: Scalar>(cfg: &ModelConfig, rng: Option<&mut ChaCha8Rng>) -> (Layout, ParamStore<S>) {
    let mut b = Builder {
        entries: Vec::new(),
        rng,
    };
    let c = cfg.channel_count;
    let mut columns = Vec::with_capacity(cfg.columns.len());
    for (i, col) in cfg.columns.iter().enumerate() {
        let p = format!("col{i}");
        let conv = cfg.backbone.cnn.then(|| {
            let fan = c * col.conv_kernel;
            ConvIds {
                kernel: b.add(format!("{p}.conv.kernel"), &[col.conv_filters, fan], Init::FanIn(fan), true),
                bias: b.add(format!("{p}.conv.bias"), &[col.conv_filters], Init::Zeros, true),
                bn: b.bn(&format!("{p}.conv.bn"), col.conv_filters),
            }
        });
        let feat = cfg.feature_width(i);
        let lstm = cfg
            .backbone
            .lstm
            .then(|| b.lstm(&format!("{p}.lstm"), feat, col.lstm_units));
        let d = cfg.latent_width(i);
        let attn = cfg.backbone.attention.then(|| AttnIds {
            w: b.add(format!("{p}.attn.w"), &[d], Init::FanIn(d), true),
            b: b.add(format!("{p}.attn.b"), &[1], Init::Zeros, true),
        });
        let kk = DEC_KERNEL * DEC_KERNEL;
        let dec = DecoderIds {
            lstm: b.lstm(&format!("{p}.dec.lstm"), d, col.dec_lstm_units),
            bn_in: b.bn(&format!("{p}.dec.bn_in"), 1),
            kernel: b.add(format!("{p}.dec.conv.kernel"), &[col.dec_filters, kk], Init::FanIn(kk), true),
            bias: b.add(format!("{p}.dec.conv.bias"), &[col.dec_filters], Init::Zeros, true),
            bn_out: b.bn(&format!("{p}.dec.bn_out"), col.dec_filters),
            out_w: b.add(format!("{p}.dec.out.w"), &[col.dec_filters], Init::FanIn(col.dec_filters), true),
            out_b: b.add(format!("{p}.dec.out.b"), &[1], Init::Zeros, true),
        };
        columns.push(ColumnIds {
            conv,
            lstm,
            attn,
            dec,
        });
    }
    let concat = cfg.concat_width();
    let h = cfg.fc_hidden;
    let k = cfg.class_count;
    let layout = Layout {
        columns,
        fc1_w: b.add("classifier.fc1.w".into(), &[concat, h], Init::FanIn(concat), true),
        fc1_b: b.add("classifier.fc1.b".into(), &[h], Init::Zeros, true),
        fc2_w: b.add("classifier.fc2.w".into(), &[h, k], Init::FanIn(h), true),
        fc2_b: b.add("classifier.fc2.b".into(), &[k], Init::Zeros, true),
        centers: b.add("classifier.centers".into(), &[k, h], Init::Zeros, false),
    };
    (layout, ParamStore { entries: b.entries })
}

/// Deterministic initialization: fan-in scaled uniform weights, zero biases, unit
/// batch-norm scale, zero shift, zero class centers.
pub fn init_params<S: Scalar>(cfg: &ModelConfig, seed: u64) -> (Layout, ParamStore<S>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    build(cfg, Some(&mut rng))
}

/// Layout and correctly shaped (zero / one) entries, without drawing random numbers.
pub fn skeleton<S: Scalar>(cfg: &ModelConfig) -> (Layout, ParamStore<S>) {
    build(cfg, None)
}
