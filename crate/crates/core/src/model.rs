//! Network collection: mapping network `P`, feature extractors `G_cd`/`G_ci`,
//! global heads, `k` local heads per space and the two domain discriminators.
//!
//! Parameters live in a flat [`ParamStore`] tagged by optimisation
//! [`Group`]; networks only hold parameter ids, so the same bundle can be
//! evaluated against a perturbed copy of the store.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Gradients, Mode, Tape, Var};
use crate::error::{GcldrError, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const CHECKPOINT_VERSION: u32 = 1;

/// The two disjoint parameter sets the training loop alternates between.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// `P`, `G_cd`, `G_ci`.
    Extractors,
    /// Global heads, local heads and discriminators.
    Heads,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn ids(&self, group: Group) -> Vec<ParamId> {
        (0..self.params.len()).filter(|&i| self.params[i].group == group).collect()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).collect()
    }

    pub fn element_count(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&i| self.params[i].value.len()).sum()
    }

    /// Mutable references to the listed parameters, in order.
    pub fn values_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut wanted: Vec<Option<&mut Tensor>> = self.params.iter_mut().map(|p| Some(&mut p.value)).collect();
        ids.iter().map(|&i| wanted[i].take().expect("duplicate parameter id")).collect()
    }

    /// Concatenated values of `ids`.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter().flat_map(|&i| self.params[i].value.data().iter().copied()).collect()
    }

    /// `θ[ids] += scale · delta`, with `delta` laid out as [`Self::flatten`].
    pub fn add_flat(&mut self, ids: &[ParamId], scale: f64, delta: &[f64]) {
        let mut off = 0;
        for &i in ids {
            let v = self.params[i].value.data_mut();
            let n = v.len();
            for (x, d) in v.iter_mut().zip(&delta[off..off + n]) {
                *x += scale * d;
            }
            off += n;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Swish,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, bias: bool },
    BatchNorm { width: usize },
    Activation { activation: Activation },
    Dropout { rate: f64 },
}

/// Layer list of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks that widths chain from `input` and returns the output width.
    pub fn validate(&self, input: usize) -> Result<usize> {
        let mut width = input;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { inputs, outputs, .. } => {
                    if *inputs != width {
                        return Err(GcldrError::config(format!(
                            "{}: layer {i} expects width {inputs}, receives {width}",
                            self.name
                        )));
                    }
                    width = *outputs;
                }
                LayerSpec::BatchNorm { width: w } if *w != width => {
                    return Err(GcldrError::config(format!("{}: batchnorm width {w} vs {width}", self.name)));
                }
                LayerSpec::Dropout { rate } if !(0.0..1.0).contains(rate) => {
                    return Err(GcldrError::config(format!("{}: dropout rate {rate}", self.name)));
                }
                _ => {}
            }
        }
        Ok(width)
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Activation { activation: Activation::Softmax }))
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                LayerSpec::Dense { inputs, outputs, bias } => inputs * outputs + if *bias { *outputs } else { 0 },
                LayerSpec::BatchNorm { width } => 2 * width,
                _ => 0,
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Bound {
    Dense { w: ParamId, b: Option<ParamId> },
    BatchNorm { gamma: ParamId, beta: ParamId, slot: usize },
    None,
}

/// A network: its spec plus the ids of its parameters in the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: NetworkSpec,
    bound: Vec<Bound>,
}

impl Network {
    fn build(
        spec: NetworkSpec,
        group: Group,
        store: &mut ParamStore,
        running: &mut Vec<BatchStats>,
        rng: &mut ChaCha8Rng,
    ) -> Network {
        let mut bound = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let b = match layer {
                LayerSpec::Dense { inputs, outputs, bias } => {
                    let limit = 1.0 / (*inputs as f64).sqrt();
                    let data = (0..inputs * outputs).map(|_| rng.gen_range(-limit..limit)).collect();
                    let w = store.add(
                        format!("{}.{i}.w", spec.name),
                        group,
                        Tensor::matrix(*inputs, *outputs, data).expect("nonzero widths"),
                    );
                    let b = bias.then(|| store.add(format!("{}.{i}.b", spec.name), group, Tensor::zeros(&[*outputs])));
                    Bound::Dense { w, b }
                }
                LayerSpec::BatchNorm { width } => {
                    let gamma = store.add(format!("{}.{i}.gamma", spec.name), group, Tensor::full(&[*width], 1.0));
                    let beta = store.add(format!("{}.{i}.beta", spec.name), group, Tensor::zeros(&[*width]));
                    running.push(BatchStats { mean: vec![0.0; *width], var: vec![1.0; *width] });
                    Bound::BatchNorm { gamma, beta, slot: running.len() - 1 }
                }
                _ => Bound::None,
            };
            bound.push(b);
        }
        Network { spec, bound }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.bound {
            match b {
                Bound::Dense { w, b } => {
                    ids.push(*w);
                    ids.extend(b.iter().copied());
                }
                Bound::BatchNorm { gamma, beta, .. } => ids.extend([*gamma, *beta]),
                Bound::None => {}
            }
        }
        ids
    }

    pub fn forward(&self, fwd: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        for (layer, bound) in self.spec.layers.iter().zip(&self.bound) {
            x = match (layer, bound) {
                (LayerSpec::Dense { .. }, Bound::Dense { w, b }) => {
                    let wv = fwd.param(*w);
                    let y = fwd.tape.matmul(x, wv)?;
                    match b {
                        Some(b) => {
                            let bv = fwd.param(*b);
                            fwd.tape.add_row(y, bv)?
                        }
                        None => y,
                    }
                }
                (LayerSpec::BatchNorm { .. }, Bound::BatchNorm { gamma, beta, slot }) => {
                    let (g, b) = (fwd.param(*gamma), fwd.param(*beta));
                    let running = fwd.running.get(*slot);
                    let (y, stats) = fwd.tape.batchnorm(x, g, b, fwd.mode, running, BATCHNORM_EPS)?;
                    if let Some(s) = stats {
                        fwd.batch_stats.push((*slot, s));
                    }
                    y
                }
                (LayerSpec::Activation { activation }, _) => match activation {
                    Activation::Tanh => fwd.tape.tanh(x),
                    Activation::Relu => fwd.tape.relu(x),
                    Activation::Swish => fwd.tape.swish(x),
                    Activation::Softmax => fwd.tape.softmax_rows(x)?,
                },
                (LayerSpec::Dropout { rate }, _) => {
                    let rate = if fwd.dropout_enabled { *rate } else { 0.0 };
                    fwd.tape.dropout(x, rate, &mut fwd.rng, fwd.mode)?
                }
                _ => unreachable!("layer/binding mismatch"),
            };
        }
        Ok(x)
    }
}

/// Which parameters enter the tape as differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    All,
    Only(Group),
}

/// One forward pass: the tape plus the parameter bindings used to build it.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    running: &'a [BatchStats],
    bound: Vec<Option<Var>>,
    trainable: Trainable,
    pub mode: Mode,
    rng: ChaCha8Rng,
    dropout_enabled: bool,
    /// `(running-stat slot, batch moments)` from every train-mode batchnorm.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(bundle: &'a ModelBundle, mode: Mode, trainable: Trainable, seed: u64) -> Self {
        Self::with_params(bundle, &bundle.params, mode, trainable, seed)
    }

    /// Forward pass against an alternative parameter store of the same layout.
    pub fn with_params(
        bundle: &'a ModelBundle,
        params: &'a ParamStore,
        mode: Mode,
        trainable: Trainable,
        seed: u64,
    ) -> Self {
        Forward {
            tape: Tape::new(),
            store: params,
            running: &bundle.running,
            bound: vec![None; params.len()],
            trainable,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dropout_enabled: true,
            batch_stats: Vec::new(),
        }
    }

    /// Turns every dropout layer into the identity (used where the loss must be smooth).
    pub fn without_dropout(mut self) -> Self {
        self.dropout_enabled = false;
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let p = self.store.get(id);
        let learn = match self.trainable {
            Trainable::Nothing => false,
            Trainable::All => true,
            Trainable::Only(g) => p.group == g,
        };
        let v = if learn { self.tape.leaf(p.value.clone()) } else { self.tape.constant(p.value.clone()) };
        self.bound[id] = Some(v);
        v
    }

    pub fn input(&mut self, x: &Tensor) -> Var {
        self.tape.constant(x.clone())
    }

    /// Gradients for `ids`; zeros for parameters the pass never touched.
    pub fn param_grads(&self, grads: &Gradients, ids: &[ParamId]) -> Vec<Tensor> {
        ids.iter()
            .map(|&i| match self.bound[i] {
                Some(v) => grads.get(v),
                None => Tensor::zeros(self.store.value(i).shape()),
            })
            .collect()
    }
}

/// Sizes and seeds for [`build_bundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub domains: usize,
    pub mapping_width: usize,
    pub feature_width: usize,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl BundleConfig {
    pub fn new(input_dim: usize, classes: usize, domains: usize) -> Self {
        BundleConfig {
            input_dim,
            classes,
            domains,
            mapping_width: 512,
            feature_width: 128,
            dropout: 0.5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 || self.classes < 2 {
            return Err(GcldrError::config("input dimension and class count must be ≥ 2"));
        }
        if self.domains < 2 {
            return Err(GcldrError::config(format!("need k ≥ 2 latent domains, got {}", self.domains)));
        }
        if self.mapping_width == 0 || self.feature_width == 0 {
            return Err(GcldrError::config("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(GcldrError::config(format!("dropout rate {} outside [0,1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(GcldrError::config("batchnorm momentum outside [0,1]"));
        }
        Ok(())
    }
}

/// Which parts of the full collection a bundle carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub ci_space: bool,
    pub global_cd: bool,
    pub local_heads: bool,
    pub discriminators: bool,
}

impl Components {
    pub const FULL: Components = Components { ci_space: true, global_cd: true, local_heads: true, discriminators: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: BundleConfig,
    pub components: Components,
    pub params: ParamStore,
    pub running: Vec<BatchStats>,
    pub mapping: Network,
    pub g_cd: Network,
    pub g_ci: Option<Network>,
    pub r_g_cd: Option<Network>,
    pub r_g_ci: Option<Network>,
    pub local_cd: Vec<Network>,
    pub local_ci: Vec<Network>,
    pub d_cd: Option<Network>,
    pub d_ci: Option<Network>,
}

fn mapping_spec(cfg: &BundleConfig) -> NetworkSpec {
    // bias omitted: the following batchnorm cancels it
    NetworkSpec {
        name: "P".into(),
        layers: vec![
            LayerSpec::Dense { inputs: cfg.input_dim, outputs: cfg.mapping_width, bias: false },
            LayerSpec::BatchNorm { width: cfg.mapping_width },
            LayerSpec::Activation { activation: Activation::Swish },
            LayerSpec::Dropout { rate: cfg.dropout },
        ],
    }
}

fn extractor_spec(name: &str, cfg: &BundleConfig) -> NetworkSpec {
    NetworkSpec {
        name: name.into(),
        layers: vec![
            LayerSpec::Dense { inputs: cfg.mapping_width, outputs: cfg.feature_width, bias: true },
            LayerSpec::Activation { activation: Activation::Tanh },
        ],
    }
}

fn head_spec(name: String, inputs: usize, outputs: usize) -> NetworkSpec {
    NetworkSpec {
        name,
        layers: vec![
            LayerSpec::Dense { inputs, outputs, bias: true },
            LayerSpec::Activation { activation: Activation::Softmax },
        ],
    }
}

/// Builds the full collection.
pub fn build_bundle(cfg: &BundleConfig) -> Result<ModelBundle> {
    build_with(cfg, Components::FULL)
}

/// Builds a bundle carrying only `parts`. `P` and `G_cd` are always present.
pub fn build_with(cfg: &BundleConfig, parts: Components) -> Result<ModelBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::default();
    let mut running = Vec::new();
    let (h, c, k) = (cfg.feature_width, cfg.classes, cfg.domains);
    let mut net = |spec: NetworkSpec, group: Group, params: &mut ParamStore, running: &mut Vec<BatchStats>| {
        Network::build(spec, group, params, running, &mut rng)
    };

    let mapping = net(mapping_spec(cfg), Group::Extractors, &mut params, &mut running);
    let g_cd = net(extractor_spec("G_cd", cfg), Group::Extractors, &mut params, &mut running);
    let g_ci = parts
        .ci_space
        .then(|| net(extractor_spec("G_ci", cfg), Group::Extractors, &mut params, &mut running));
    let r_g_cd = parts
        .global_cd
        .then(|| net(head_spec("R_g_cd".into(), h, c), Group::Heads, &mut params, &mut running));
    let r_g_ci = parts
        .ci_space
        .then(|| net(head_spec("R_g_ci".into(), h, c), Group::Heads, &mut params, &mut running));
    let mut local_cd = Vec::new();
    let mut local_ci = Vec::new();
    if parts.local_heads {
        for r in 0..k {
            local_cd.push(net(head_spec(format!("R_l_cd[{r}]"), h, c), Group::Heads, &mut params, &mut running));
        }
        if parts.ci_space {
            for r in 0..k {
                local_ci.push(net(head_spec(format!("R_l_ci[{r}]"), h, c), Group::Heads, &mut params, &mut running));
            }
        }
    }
    let d_cd = parts
        .discriminators
        .then(|| net(head_spec("D_cd".into(), h, k), Group::Heads, &mut params, &mut running));
    let d_ci = (parts.discriminators && parts.ci_space)
        .then(|| net(head_spec("D_ci".into(), h, k), Group::Heads, &mut params, &mut running));

    Ok(ModelBundle {
        config: cfg.clone(),
        components: parts,
        params,
        running,
        mapping,
        g_cd,
        g_ci,
        r_g_cd,
        r_g_ci,
        local_cd,
        local_ci,
        d_cd,
        d_ci,
    })
}

/// Features of both spaces; `f_ci` is `None` when the bundle has no ci branch.
pub struct Features {
    pub cd: Var,
    pub ci: Option<Var>,
}

impl ModelBundle {
    pub fn networks(&self) -> Vec<&Network> {
        let mut v = vec![&self.mapping, &self.g_cd];
        v.extend(self.g_ci.iter());
        v.extend(self.r_g_cd.iter());
        v.extend(self.r_g_ci.iter());
        v.extend(self.local_cd.iter());
        v.extend(self.local_ci.iter());
        v.extend(self.d_cd.iter());
        v.extend(self.d_ci.iter());
        v
    }

    /// Parameter ids of one optimisation group.
    pub fn select_group(&self, which: Group) -> Vec<ParamId> {
        self.params.ids(which)
    }

    pub fn param_count(&self) -> usize {
        self.params.element_count(&self.params.all_ids())
    }

    pub fn forward_features(&self, fwd: &mut Forward<'_>, x: &Tensor) -> Result<Features> {
        if !x.is_matrix() || x.cols() != self.config.input_dim {
            return Err(GcldrError::dim(format!(
                "input {:?}, model expects width {}",
                x.shape(),
                self.config.input_dim
            )));
        }
        let xv = fwd.input(x);
        let fc = self.mapping.forward(fwd, xv)?;
        let cd = self.g_cd.forward(fwd, fc)?;
        let ci = match &self.g_ci {
            Some(g) => Some(g.forward(fwd, fc)?),
            None => None,
        };
        Ok(Features { cd, ci })
    }

    /// Folds train-mode batch moments into the running statistics.
    pub fn update_running(&mut self, stats: &[(usize, BatchStats)]) {
        let m = self.config.bn_momentum;
        for (slot, s) in stats {
            let r = &mut self.running[*slot];
            for (rm, bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = (1.0 - m) * *rm + m * bm;
            }
            for (rv, bv) in r.var.iter_mut().zip(&s.var) {
                *rv = (1.0 - m) * *rv + m * bv;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = Checkpoint { format_version: CHECKPOINT_VERSION, bundle: self.clone() };
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let doc: Checkpoint = serde_json::from_reader(f)?;
        if doc.format_version != CHECKPOINT_VERSION {
            return Err(GcldrError::config(format!("unsupported checkpoint version {}", doc.format_version)));
        }
        doc.bundle.check_layout()?;
        Ok(doc.bundle)
    }

    fn check_layout(&self) -> Result<()> {
        for net in self.networks() {
            for id in net.param_ids() {
                if id >= self.params.len() {
                    return Err(GcldrError::config(format!("{} references missing parameter {id}", net.spec.name)));
                }
            }
        }
        self.mapping.spec.validate(self.config.input_dim)?;
        Ok(())
    }
}

/// Probabilities of a softmax head.
pub fn head_forward(fwd: &mut Forward<'_>, head: &Network, f: Var) -> Result<Var> {
    if !head.spec.ends_in_softmax() {
        return Err(GcldrError::Contract(format!("{} is not a softmax head", head.spec.name)));
    }
    head.forward(fwd, f)
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    bundle: ModelBundle,
}
