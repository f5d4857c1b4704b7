//! Small convolutional networks with optional passport layers.
//!
//! Every convolution is followed by a normalization unit. A unit is either
//! plain (trainable scale and shift) or a passport layer bound to that
//! convolution's weights. Units that may carry a passport are numbered by
//! slot; a passport set supplies one entry per slot.

use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::passgen::PassportSet;
use crate::passport::{hidden_vars, passport_layer_forward, HiddenParams, PassportKind, Standardization};
use crate::rng::substream;
use crate::tensor::{conv_output_extent, BatchStats, Real, Tape, Tensor, Var};

/// Momentum of the running-statistics average.
pub const RUNNING_MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride,
            padding,
        }
    }
}

/// One stage of the layer graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockSpec {
    /// conv, normalization unit, optional ReLU.
    Conv { conv: ConvSpec, relu: bool },
    /// Two conv units with a skip connection, then ReLU. The skip is a
    /// 2x2 strided conv with a plain unit when the shape changes.
    Residual { first: ConvSpec, second: ConvSpec },
}

/// Builds a conv-passport block, residual when two convolutions are given.
pub fn assemble_passport_block(convs: &[ConvSpec], activation: bool) -> Result<BlockSpec> {
    match convs {
        [conv] => Ok(BlockSpec::Conv {
            conv: *conv,
            relu: activation,
        }),
        [first, second] => {
            if first.cout != second.cin {
                return Err(shape_err("residual block convs do not chain"));
            }
            Ok(BlockSpec::Residual {
                first: *first,
                second: *second,
            })
        }
        _ => Err(shape_err(format!("a block has one or two convs, got {}", convs.len()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    MiniNet,
    MiniResNet,
    Blocks(Vec<BlockSpec>),
}

fn default_widths() -> Vec<usize> {
    vec![16, 32]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// Passport kind of every eligible unit; `None` builds the passport-free twin.
    #[serde(default)]
    pub passport: Option<PassportKind>,
    /// Standardize conv outputs per channel before the affine transform.
    #[serde(default = "default_true")]
    pub normalize_input: bool,
}

impl ModelConfig {
    pub fn mini_net(in_channels: usize, image_size: usize, num_classes: usize, passport: Option<PassportKind>) -> Self {
        Self {
            arch: Arch::MiniNet,
            in_channels,
            image_size,
            num_classes,
            widths: default_widths(),
            passport,
            normalize_input: true,
        }
    }

    pub fn blocks(&self) -> Result<Vec<BlockSpec>> {
        let w = &self.widths;
        match &self.arch {
            Arch::Blocks(b) => Ok(b.clone()),
            Arch::MiniNet | Arch::MiniResNet if w.len() != 2 => {
                Err(Error::Config(format!("widths must have two entries, got {w:?}")))
            }
            Arch::MiniNet => Ok(vec![
                BlockSpec::Conv {
                    conv: ConvSpec::new(self.in_channels, w[0], 3, 1, 1),
                    relu: true,
                },
                BlockSpec::Conv {
                    conv: ConvSpec::new(w[0], w[1], 4, 2, 1),
                    relu: true,
                },
            ]),
            Arch::MiniResNet => Ok(vec![
                BlockSpec::Conv {
                    conv: ConvSpec::new(self.in_channels, w[0], 3, 1, 1),
                    relu: true,
                },
                assemble_passport_block(
                    &[ConvSpec::new(w[0], w[0], 3, 1, 1), ConvSpec::new(w[0], w[0], 3, 1, 1)],
                    true,
                )?,
                assemble_passport_block(
                    &[ConvSpec::new(w[0], w[1], 4, 2, 1), ConvSpec::new(w[1], w[1], 3, 1, 1)],
                    true,
                )?,
            ]),
        }
    }
}

/// Normalization unit flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitNorm {
    Plain,
    Passport(PassportKind),
}

/// A convolution and its normalization unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub conv: ConvSpec,
    /// Spatial extent of the unit's input.
    pub in_size: usize,
    pub out_size: usize,
    pub norm: UnitNorm,
    /// Passport slot, for units that may be passport layers.
    pub slot: Option<usize>,
}

impl ConvUnit {
    pub fn weight_name(&self) -> String {
        format!("{}.conv.weight", self.name)
    }

    pub fn gamma_name(&self) -> String {
        format!("{}.norm.gamma", self.name)
    }

    pub fn beta_name(&self) -> String {
        format!("{}.norm.beta", self.name)
    }

    pub fn running_mean_name(&self) -> String {
        format!("{}.norm.running_mean", self.name)
    }

    pub fn running_var_name(&self) -> String {
        format!("{}.norm.running_var", self.name)
    }

    pub fn has_trainable_gamma(&self) -> bool {
        !matches!(self.norm, UnitNorm::Passport(k) if k.derives_gamma())
    }

    pub fn has_trainable_beta(&self) -> bool {
        !matches!(self.norm, UnitNorm::Passport(k) if k.derives_beta())
    }

    /// Shape of the passport tensor this unit convolves.
    pub fn passport_shape(&self) -> Vec<usize> {
        vec![1, self.conv.cin, self.in_size, self.in_size]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Unit {
        unit: usize,
        relu: bool,
    },
    Residual {
        first: usize,
        second: usize,
        shortcut: Option<usize>,
    },
}

/// Training or inference behaviour of the normalization units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics.
    Train,
    /// Running statistics.
    Eval,
}

/// Which parameters become gradient-tracking leaves.
#[derive(Debug, Clone, Default)]
pub enum GradSpec {
    #[default]
    None,
    All,
    Only(BTreeSet<String>),
}

impl GradSpec {
    fn wants(&self, name: &str) -> bool {
        match self {
            GradSpec::None => false,
            GradSpec::All => true,
            GradSpec::Only(s) => s.contains(name),
        }
    }
}

pub struct ForwardOutput<T: Real> {
    pub logits: Var,
    /// Tape var of every parameter.
    pub params: BTreeMap<String, Var>,
    /// Batch statistics per unit index, in train mode with standardization on.
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
    /// Input to each slotted unit, when recording was requested.
    pub slot_inputs: Vec<Option<Tensor<T>>>,
    /// Applied scale and shift per unit index.
    pub affine: Vec<(Var, Var)>,
}

/// Parameter census of a model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    /// Stored and optimized.
    pub trainable: BTreeSet<String>,
    /// Recomputed from weights and passport on every forward pass.
    pub derived: BTreeSet<String>,
}

/// A network with parameters and normalization buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    units: Vec<ConvUnit>,
    graph: Vec<Node>,
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
    feature_dim: usize,
}

impl Model {
    /// Builds the graph with zero weights; see [`crate::train::init_weights`].
    pub fn new(config: ModelConfig) -> Result<Self> {
        if config.num_classes == 0 || config.in_channels == 0 || config.image_size == 0 {
            return Err(Error::Config(
                "model needs classes, channels and a positive image size".into(),
            ));
        }
        let blocks = config.blocks()?;
        let norm = config.passport.map_or(UnitNorm::Plain, UnitNorm::Passport);
        let mut units = Vec::new();
        let mut graph = Vec::new();
        let mut size = config.image_size;
        let mut channels = config.in_channels;
        let mut slot = 0;
        let mut add_unit =
            |units: &mut Vec<ConvUnit>, name: String, conv: ConvSpec, size: usize, eligible: bool| -> Result<usize> {
                if conv.cin == 0 || conv.cout == 0 {
                    return Err(shape_err(format!("{name}: zero channels")));
                }
                let out = conv_output_extent(size, conv.kernel, conv.stride, conv.padding)?;
                let s = eligible.then(|| {
                    slot += 1;
                    slot - 1
                });
                units.push(ConvUnit {
                    name,
                    conv,
                    in_size: size,
                    out_size: out,
                    norm: if eligible { norm } else { UnitNorm::Plain },
                    slot: s,
                });
                Ok(units.len() - 1)
            };
        for (bi, block) in blocks.iter().enumerate() {
            match block {
                BlockSpec::Conv { conv, relu } => {
                    if conv.cin != channels {
                        return Err(shape_err(format!(
                            "block {bi} expects {} channels, gets {channels}",
                            conv.cin
                        )));
                    }
                    let u = add_unit(&mut units, format!("block{bi}"), *conv, size, true)?;
                    size = units[u].out_size;
                    channels = conv.cout;
                    graph.push(Node::Unit { unit: u, relu: *relu });
                }
                BlockSpec::Residual { first, second } => {
                    if first.cin != channels || second.cin != first.cout {
                        return Err(shape_err(format!("residual block {bi} channels do not chain")));
                    }
                    let a = add_unit(&mut units, format!("block{bi}.conv1"), *first, size, true)?;
                    let mid = units[a].out_size;
                    let b = add_unit(&mut units, format!("block{bi}.conv2"), *second, mid, true)?;
                    let out = units[b].out_size;
                    let shortcut = if out == size && second.cout == channels {
                        None
                    } else {
                        if !size.is_multiple_of(out) {
                            return Err(shape_err(format!(
                                "residual block {bi}: {size} -> {out} is not an integer stride"
                            )));
                        }
                        let s = size / out;
                        let sc = ConvSpec::new(channels, second.cout, s, s, 0);
                        Some(add_unit(&mut units, format!("block{bi}.shortcut"), sc, size, false)?)
                    };
                    size = out;
                    channels = second.cout;
                    graph.push(Node::Residual {
                        first: a,
                        second: b,
                        shortcut,
                    });
                }
            }
        }
        let mut model = Self {
            config,
            units,
            graph,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            feature_dim: channels,
        };
        model.allocate();
        Ok(model)
    }

    fn allocate(&mut self) {
        self.params.clear();
        self.buffers.clear();
        for u in &self.units {
            let c = &u.conv;
            self.params
                .insert(u.weight_name(), Tensor::zeros(vec![c.cout, c.cin, c.kernel, c.kernel]));
            if u.has_trainable_gamma() {
                self.params.insert(u.gamma_name(), Tensor::full(vec![c.cout], 1.0));
            }
            if u.has_trainable_beta() {
                self.params.insert(u.beta_name(), Tensor::zeros(vec![c.cout]));
            }
            if self.config.normalize_input {
                self.buffers.insert(u.running_mean_name(), Tensor::zeros(vec![c.cout]));
                self.buffers
                    .insert(u.running_var_name(), Tensor::full(vec![c.cout], 1.0));
            }
        }
        self.params.insert(
            "fc.weight".into(),
            Tensor::zeros(vec![self.config.num_classes, self.feature_dim]),
        );
        self.params
            .insert("fc.bias".into(), Tensor::zeros(vec![self.config.num_classes]));
    }

    pub fn units(&self) -> &[ConvUnit] {
        &self.units
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter {name:?}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("model has no buffer {name:?}")))
    }

    /// Replaces a parameter or buffer value of identical shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = match self.params.get_mut(name) {
            Some(t) => t,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?} for this model")))?,
        };
        if slot.shape() != value.shape() {
            return Err(shape_err(format!(
                "{name}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Number of passport slots.
    pub fn num_slots(&self) -> usize {
        self.units.iter().filter(|u| u.slot.is_some()).count()
    }

    /// Number of passport layers actually present.
    pub fn num_passport_layers(&self) -> usize {
        self.units
            .iter()
            .filter(|u| matches!(u.norm, UnitNorm::Passport(_)))
            .count()
    }

    /// Conv units plus the dense head.
    pub fn total_layers(&self) -> usize {
        self.units.len() + 1
    }

    /// Units in slot order.
    pub fn slot_units(&self) -> Vec<&ConvUnit> {
        let mut v: Vec<&ConvUnit> = self.units.iter().filter(|u| u.slot.is_some()).collect();
        v.sort_by_key(|u| u.slot);
        v
    }

    pub fn passport_shapes(&self) -> Vec<Vec<usize>> {
        self.slot_units().iter().map(|u| u.passport_shape()).collect()
    }

    /// Per-slot passport kind, `None` for plain slots.
    pub fn slot_kinds(&self) -> Vec<Option<PassportKind>> {
        self.slot_units()
            .iter()
            .map(|u| match u.norm {
                UnitNorm::Passport(k) => Some(k),
                UnitNorm::Plain => None,
            })
            .collect()
    }

    pub fn unit_norms(&self) -> Vec<UnitNorm> {
        self.units.iter().map(|u| u.norm).collect()
    }

    /// Changes unit normalization flavours, adding or dropping the affected
    /// scale/shift parameters. New trainable scale starts at 1, shift at 0.
    pub fn set_unit_norms(&mut self, norms: &[UnitNorm]) -> Result<()> {
        if norms.len() != self.units.len() {
            return Err(shape_err(format!(
                "{} unit norms for {} units",
                norms.len(),
                self.units.len()
            )));
        }
        for (u, &n) in self.units.iter_mut().zip(norms) {
            if u.slot.is_none() && n != UnitNorm::Plain {
                return Err(Error::Passport(format!("unit {} cannot carry a passport", u.name)));
            }
            u.norm = n;
            let c = u.conv.cout;
            if u.has_trainable_gamma() {
                self.params
                    .entry(u.gamma_name())
                    .or_insert_with(|| Tensor::full(vec![c], 1.0));
            } else {
                self.params.remove(&u.gamma_name());
            }
            if u.has_trainable_beta() {
                self.params
                    .entry(u.beta_name())
                    .or_insert_with(|| Tensor::zeros(vec![c]));
            } else {
                self.params.remove(&u.beta_name());
            }
        }
        Ok(())
    }

    /// Splits the parameter census into stored and derived names.
    pub fn partition_parameters(&self) -> ParamPartition {
        let trainable: BTreeSet<String> = self.params.keys().cloned().collect();
        let mut derived = BTreeSet::new();
        for u in &self.units {
            if let UnitNorm::Passport(k) = u.norm {
                if k.derives_gamma() {
                    derived.insert(u.gamma_name());
                }
                if k.derives_beta() {
                    derived.insert(u.beta_name());
                }
            }
        }
        ParamPartition { trainable, derived }
    }

    /// Runs the network on a batch `[N, C, H, W]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        passport: Option<&PassportSet>,
        mode: Mode,
        grads: &GradSpec,
        record_slot_inputs: bool,
    ) -> Result<ForwardOutput<T>> {
        let want = [self.config.in_channels, self.config.image_size, self.config.image_size];
        if images.rank() != 4 || images.shape()[1..] != want {
            return Err(shape_err(format!(
                "model expects [N, {}, {}, {}], got {:?}",
                want[0],
                want[1],
                want[2],
                images.shape()
            )));
        }
        if self.num_passport_layers() > 0 {
            let p = passport.ok_or_else(|| Error::Passport("model needs a passport".into()))?;
            if p.entries.len() != self.num_slots() {
                return Err(Error::Passport(format!(
                    "passport has {} entries, model has {} passport slots",
                    p.entries.len(),
                    self.num_slots()
                )));
            }
        }
        let mut params = BTreeMap::new();
        for (name, t) in &self.params {
            let v = tape.leaf(t.cast(), grads.wants(name));
            params.insert(name.clone(), v);
        }
        let mut state = FwdState {
            batch_stats: Vec::new(),
            slot_inputs: vec![None; self.num_slots()],
            affine: vec![None; self.units.len()],
            record: record_slot_inputs,
        };
        let mut x = tape.constant(images.clone());
        for node in &self.graph {
            x = match *node {
                Node::Unit { unit, relu } => {
                    let y = self.unit_forward(tape, unit, x, &params, passport, mode, &mut state)?;
                    if relu {
                        tape.relu(y)
                    } else {
                        y
                    }
                }
                Node::Residual {
                    first,
                    second,
                    shortcut,
                } => {
                    let h = self.unit_forward(tape, first, x, &params, passport, mode, &mut state)?;
                    let h = tape.relu(h);
                    let h = self.unit_forward(tape, second, h, &params, passport, mode, &mut state)?;
                    let skip = match shortcut {
                        Some(s) => self.unit_forward(tape, s, x, &params, passport, mode, &mut state)?,
                        None => x,
                    };
                    let sum = tape.add(h, skip)?;
                    tape.relu(sum)
                }
            };
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.dense(pooled, params["fc.weight"], params["fc.bias"])?;
        Ok(ForwardOutput {
            logits,
            params,
            batch_stats: state.batch_stats,
            slot_inputs: state.slot_inputs,
            affine: state.affine.into_iter().map(|a| a.expect("every unit runs")).collect(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn unit_forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        index: usize,
        x: Var,
        params: &BTreeMap<String, Var>,
        passport: Option<&PassportSet>,
        mode: Mode,
        state: &mut FwdState<T>,
    ) -> Result<Var> {
        let u = &self.units[index];
        if let (Some(slot), true) = (u.slot, state.record) {
            state.slot_inputs[slot] = Some(tape.value(x).clone());
        }
        let w = params[&u.weight_name()];
        let y = tape.conv2d(x, w, u.conv.stride, u.conv.padding)?;
        let tg = params.get(&u.gamma_name()).copied();
        let tb = params.get(&u.beta_name()).copied();
        let (g, b) = match u.norm {
            UnitNorm::Plain => (tg.expect("plain unit has gamma"), tb.expect("plain unit has beta")),
            UnitNorm::Passport(kind) => {
                let slot = u.slot.expect("passport units are slotted");
                let entry = &passport.expect("checked in forward").entries[slot];
                let pair = entry.pair();
                for (shape, what) in [(pair.gamma.as_ref(), "gamma"), (pair.beta.as_ref(), "beta")] {
                    if let Some(t) = shape {
                        if t.shape() != u.passport_shape().as_slice() {
                            return Err(Error::Passport(format!(
                                "slot {slot} {what} passport has shape {:?}, layer expects {:?}",
                                t.shape(),
                                u.passport_shape()
                            )));
                        }
                    }
                }
                hidden_vars(tape, kind, w, tg, tb, &pair, u.conv.stride, u.conv.padding)?
            }
        };
        state.affine[index] = Some((g, b));
        let standardization = match (self.config.normalize_input, mode) {
            (false, _) => Standardization::None,
            (true, Mode::Train) => Standardization::Batch,
            (true, Mode::Eval) => {
                let mean: Vec<T> = self.buffers[&u.running_mean_name()].cast().into_data();
                let var: Vec<T> = self.buffers[&u.running_var_name()].cast().into_data();
                let out = tape.standardize(y, &mean, &var, T::from_f64(crate::passport::NORM_EPS))?;
                return tape.channel_affine(out, g, b);
            }
        };
        let out = passport_layer_forward(tape, y, g, b, standardization)?;
        if let Some(s) = out.batch_stats {
            state.batch_stats.push((index, s));
        }
        Ok(out.output)
    }

    /// Folds batch statistics into the running averages.
    pub fn update_running_stats<T: Real>(&mut self, stats: &[(usize, BatchStats<T>)]) -> Result<()> {
        let m = RUNNING_MOMENTUM;
        for (index, s) in stats {
            let u = &self.units[*index];
            let (mn, vn) = (u.running_mean_name(), u.running_var_name());
            let unbias = if s.count > 1 {
                s.count as f32 / (s.count - 1) as f32
            } else {
                1.0
            };
            let rm = self.buffer_mut(&mn)?;
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = m * *r + (1.0 - m) * b.to_f32();
            }
            let rv = self.buffer_mut(&vn)?;
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = m * *r + (1.0 - m) * b.to_f32() * unbias;
            }
        }
        Ok(())
    }

    /// Scale and shift every unit applies under `passport`.
    pub fn hidden_params(&self, passport: Option<&PassportSet>) -> Result<Vec<HiddenParams>> {
        let mut out = Vec::with_capacity(self.units.len());
        for u in &self.units {
            let w = &self.params[&u.weight_name()];
            let h = match u.norm {
                UnitNorm::Plain => HiddenParams {
                    gamma: self.params[&u.gamma_name()].clone(),
                    beta: self.params[&u.beta_name()].clone(),
                },
                UnitNorm::Passport(kind) => {
                    let p = passport.ok_or_else(|| Error::Passport("model needs a passport".into()))?;
                    let slot = u.slot.expect("passport units are slotted");
                    let entry = p
                        .entries
                        .get(slot)
                        .ok_or_else(|| Error::Passport(format!("passport has no entry for slot {slot}")))?;
                    crate::passport::derive_hidden_params(
                        kind,
                        w,
                        self.params.get(&u.gamma_name()),
                        self.params.get(&u.beta_name()),
                        &entry.pair(),
                        u.conv.stride,
                        u.conv.padding,
                    )?
                }
            };
            out.push(h);
        }
        Ok(out)
    }

    /// Logits for a batch in eval mode.
    pub fn predict(&self, images: &Tensor, passport: Option<&PassportSet>) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let out = self.forward(&mut tape, images, passport, Mode::Eval, &GradSpec::None, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// SHA-256 over parameter and buffer names and bits.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.params.iter().chain(&self.buffers) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// He-normal conv and dense weights, unit scale, zero shift and bias.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = substream(seed, "init");
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".weight") {
                let fan_in: usize = t.shape()[1..].iter().product();
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
                for v in t.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            } else if name.ends_with(".gamma") {
                t.data_mut().fill(1.0);
            } else {
                t.data_mut().fill(0.0);
            }
        }
        for (name, t) in self.buffers.iter_mut() {
            t.data_mut().fill(if name.ends_with("running_var") { 1.0 } else { 0.0 });
        }
    }
}

struct FwdState<T: Real> {
    batch_stats: Vec<(usize, BatchStats<T>)>,
    slot_inputs: Vec<Option<Tensor<T>>>,
    affine: Vec<Option<(Var, Var)>>,
    record: bool,
}

/// Index of the largest logit per row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mini_net_shapes_and_slots() {
        let m = Model::new(ModelConfig::mini_net(1, 16, 10, Some(PassportKind::V3))).unwrap();
        assert_eq!(m.num_slots(), 2);
        assert_eq!(m.passport_shapes(), vec![vec![1, 1, 16, 16], vec![1, 16, 16, 16]]);
        assert_eq!(m.total_layers(), 3);
        assert!(m.params().keys().all(|k| !k.contains("norm")));
    }

    #[test]
    fn mini_resnet_has_plain_shortcut() {
        let mut cfg = ModelConfig::mini_net(1, 16, 10, Some(PassportKind::V1));
        cfg.arch = Arch::MiniResNet;
        let m = Model::new(cfg).unwrap();
        assert_eq!(m.num_slots(), 5);
        let sc = m.units().iter().find(|u| u.name.ends_with("shortcut")).unwrap();
        assert_eq!(sc.norm, UnitNorm::Plain);
        assert_eq!(sc.conv.kernel, 2);
        assert!(m.params().contains_key(&sc.gamma_name()));
    }

    #[test]
    fn census_follows_kind() {
        for (kind, gamma, beta) in [
            (None, true, true),
            (Some(PassportKind::V1), false, true),
            (Some(PassportKind::V2), true, false),
            (Some(PassportKind::V3), false, false),
        ] {
            let m = Model::new(ModelConfig::mini_net(1, 8, 3, kind)).unwrap();
            let p = m.partition_parameters();
            let u = &m.units()[0];
            assert_eq!(p.trainable.contains(&u.gamma_name()), gamma);
            assert_eq!(p.trainable.contains(&u.beta_name()), beta);
            assert_eq!(p.derived.contains(&u.gamma_name()), kind.is_some() && !gamma);
            assert!(p.trainable.is_disjoint(&p.derived));
            if kind.is_none() {
                assert!(p.derived.is_empty());
            }
        }
    }

    #[test]
    fn bad_geometry_is_rejected() {
        let cfg = ModelConfig::mini_net(1, 15, 10, None);
        assert!(matches!(Model::new(cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 2.0, 2.0, -1.0, -3.0, -2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![1, 0]);
    }
}
