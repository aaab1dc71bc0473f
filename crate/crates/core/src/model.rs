//! The network: optional frozen sinusoidal feature mapping, stacked
//! GraphSAGE layers with `sin` activation, and a per-node linear read-out.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphrep::{
    edge_features, edge_features_uniform, Adjacency, EdgeFeatureKind, GraphTopology, MeanAggregator,
};

/// Layer widths such as `2+40+256x5+1`: input features, then (when a
/// mapping is configured) the mapped width, then hidden widths, then 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Architecture {
    widths: Vec<usize>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "architecture needs input, at least one hidden width, and output; got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArgument("architecture widths must be positive".into()));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidArgument(format!(
                "last architecture width must be 1, got {}",
                widths.last().unwrap()
            )));
        }
        Ok(Self { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input(&self) -> usize {
        self.widths[0]
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut widths = Vec::new();
        for token in s.split('+') {
            let token = token.trim();
            let parse = |t: &str| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad width `{t}` in architecture `{s}`")))
            };
            match token.split_once(['x', 'X', '×']) {
                Some((w, n)) => {
                    let (w, n) = (parse(w)?, parse(n)?);
                    widths.extend(std::iter::repeat_n(w, n));
                }
                None => widths.push(parse(token)?),
            }
        }
        Architecture::new(widths)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        let mut i = 0;
        while i < self.widths.len() {
            let w = self.widths[i];
            let mut run = 1;
            while i + run < self.widths.len() && self.widths[i + run] == w {
                run += 1;
            }
            // keep the input and output widths as separate tokens
            if run > 1 && i > 0 && i + run < self.widths.len() {
                parts.push(format!("{w}x{run}"));
                i += run;
            } else {
                parts.push(w.to_string());
                i += 1;
            }
        }
        write!(f, "{}", parts.join("+"))
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MappingSpec {
    #[default]
    None,
    /// `[cos(2 pi f B), sin(2 pi f B)]`, `B` entries from `N(0, sigma^2)`.
    Gamma1 { sigma: f64 },
    /// `[cos(C (x) f), sin(C (x) f)]`, `C` entries from `N(0, sigma^2)`.
    Gamma2 { sigma: f64 },
}

fn default_delta() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default)]
    pub mapping: MappingSpec,
    #[serde(default)]
    pub edge_feature: EdgeFeatureKind,
    #[serde(default)]
    pub adjacency: Adjacency,
    #[serde(default)]
    pub batchnorm: bool,
    /// Adds a square right factor `R` to every layer: `sin(concat W R + b)`.
    #[serde(default)]
    pub two_sided_update: bool,
    /// Output scale: interior coefficients are `delta * f_out`.
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        Self {
            architecture,
            mapping: MappingSpec::None,
            edge_feature: EdgeFeatureKind::Uniform,
            adjacency: Adjacency::Element,
            batchnorm: false,
            two_sided_update: false,
            delta: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.architecture.widths();
        let q = w[0];
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidArgument(format!("delta must be positive, got {}", self.delta)));
        }
        match self.mapping {
            MappingSpec::None => {}
            MappingSpec::Gamma1 { sigma } | MappingSpec::Gamma2 { sigma } => {
                if w.len() < 4 {
                    return Err(Error::InvalidArgument(format!(
                        "architecture `{}` has no room for a mapped width and a hidden layer",
                        self.architecture
                    )));
                }
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::InvalidArgument(format!("mapping sigma must be positive, got {sigma}")));
                }
                let mapped = w[1];
                let divisor = match self.mapping {
                    MappingSpec::Gamma1 { .. } => 2,
                    _ => 2 * q,
                };
                if !mapped.is_multiple_of(divisor) {
                    return Err(Error::InvalidArgument(format!(
                        "mapped width {mapped} must be a multiple of {divisor} for this mapping"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Input feature count `q`.
    pub fn input_width(&self) -> usize {
        self.architecture.input()
    }

    /// Width entering the first SAGE layer.
    pub fn first_layer_input(&self) -> usize {
        let w = self.architecture.widths();
        match self.mapping {
            MappingSpec::None => w[0],
            _ => w[1],
        }
    }

    /// Widths of the SAGE layers.
    pub fn hidden_widths(&self) -> &[usize] {
        let w = self.architecture.widths();
        let start = if self.mapping == MappingSpec::None { 1 } else { 2 };
        &w[start..w.len() - 1]
    }

    /// Number of random frequencies (`m1` or `m2`).
    pub fn mapping_size(&self) -> usize {
        let w = self.architecture.widths();
        match self.mapping {
            MappingSpec::None => 0,
            MappingSpec::Gamma1 { .. } => w[1] / 2,
            MappingSpec::Gamma2 { .. } => w[1] / (2 * w[0]),
        }
    }
}

/// Frozen mapping matrix; the raw draw `B` (q x m1) or `C` (1 x m2).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapping {
    pub spec: MappingSpec,
    pub raw: Option<Tensor>,
    /// `q x width/2` matrix whose product with a feature row gives the
    /// phases.
    phases: Option<Tensor>,
}

impl FeatureMapping {
    pub fn none() -> Self {
        Self {
            spec: MappingSpec::None,
            raw: None,
            phases: None,
        }
    }

    pub fn from_raw(spec: MappingSpec, q: usize, raw: Tensor) -> Result<Self> {
        let phases = match spec {
            MappingSpec::None => {
                return Ok(Self::none());
            }
            MappingSpec::Gamma1 { .. } => {
                if raw.rows() != q {
                    return Err(Error::DimensionMismatch {
                        context: "gamma1 matrix rows",
                        expected: q,
                        actual: raw.rows(),
                    });
                }
                let two_pi = 2.0 * std::f64::consts::PI;
                Tensor::from_fn(q, raw.cols(), |r, c| two_pi * raw.get(r, c))
            }
            MappingSpec::Gamma2 { .. } => {
                if raw.rows() != 1 {
                    return Err(Error::DimensionMismatch {
                        context: "gamma2 scale vector rows",
                        expected: 1,
                        actual: raw.rows(),
                    });
                }
                // (C (x) f)[c q + a] = C_c f_a
                let m = raw.cols();
                Tensor::from_fn(q, m * q, |a, col| if col % q == a { raw.get(0, col / q) } else { 0.0 })
            }
        };
        Ok(Self {
            spec,
            raw: Some(raw),
            phases: Some(phases),
        })
    }

    /// Lifts `N x q` features to `N x width` (identity for `None`).
    pub fn apply(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let Some(phases) = &self.phases else {
            return Ok(features);
        };
        if tape.value(features).cols() != phases.rows() {
            return Err(Error::DimensionMismatch {
                context: "mapping input width",
                expected: phases.rows(),
                actual: tape.value(features).cols(),
            });
        }
        let p = tape.constant(phases.clone())?;
        let z = tape.matmul(features, p)?;
        let c = tape.cos(z)?;
        let s = tape.sin(z)?;
        tape.concat_cols(c, s)
    }
}

/// Aggregators for a topology: the first layer may use distance features,
/// the rest always use uniform ones.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub topo: Arc<GraphTopology>,
    pub first: Arc<MeanAggregator>,
    pub rest: Arc<MeanAggregator>,
}

impl GraphContext {
    pub fn new(topo: Arc<GraphTopology>, first_layer: EdgeFeatureKind) -> Result<Self> {
        let rest = Arc::new(MeanAggregator::new(&topo, &edge_features_uniform(&topo))?);
        let first = match first_layer {
            EdgeFeatureKind::Uniform => rest.clone(),
            kind => Arc::new(MeanAggregator::new(&topo, &edge_features(&topo, kind)?)?),
        };
        Ok(Self { topo, first, rest })
    }

    pub fn num_nodes(&self) -> usize {
        self.topo.num_nodes()
    }
}

/// `[x_std, y_std]` per node, plus `mu` as a third column when given. Several
/// `mu` vectors stack into a batch of graphs.
pub fn node_features(topo: &GraphTopology, mus: &[&[f64]]) -> Result<Tensor> {
    let n = topo.num_nodes();
    if mus.is_empty() {
        return Ok(Tensor::from_fn(n, 2, |r, c| topo.coords_std()[r][c]));
    }
    let mut data = Vec::with_capacity(3 * n * mus.len());
    for mu in mus {
        if mu.len() != n {
            return Err(Error::DimensionMismatch {
                context: "parameter vector length",
                expected: n,
                actual: mu.len(),
            });
        }
        for (p, m) in topo.coords_std().iter().zip(mu.iter()) {
            data.extend([p[0], p[1], *m]);
        }
    }
    Tensor::from_vec(n * mus.len(), 3, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batchnorm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BATCHNORM_MOMENTUM: f64 = 0.1;

/// Result of one forward pass recorded on a tape.
pub struct ForwardPass {
    /// `rows x 1` network output `f_out`.
    pub output: Var,
    /// Tape handles of the trainable parameters, aligned with
    /// [`Model::params`].
    pub params: Vec<Var>,
    /// Train-mode batch statistics per batchnorm layer.
    pub batch_stats: Vec<BatchStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    mapping: FeatureMapping,
    names: Vec<String>,
    params: Vec<Tensor>,
    running: Vec<RunningStats>,
}

/// Parameter slots of one SAGE layer inside the flat parameter list.
struct LayerSlots {
    weight: usize,
    right: Option<usize>,
    bias: Option<usize>,
    bn: Option<(usize, usize)>,
}

impl Model {
    /// Glorot-uniform weights, zero biases, frozen mapping drawn from the
    /// configured normal distribution; fully determined by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let q = config.input_width();
        let mapping = match config.mapping {
            MappingSpec::None => FeatureMapping::none(),
            MappingSpec::Gamma1 { sigma } | MappingSpec::Gamma2 { sigma } => {
                let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let m = config.mapping_size();
                let rows = if matches!(config.mapping, MappingSpec::Gamma1 { .. }) { q } else { 1 };
                let raw = Tensor::from_fn(rows, m, |_, _| normal.sample(&mut rng));
                FeatureMapping::from_raw(config.mapping, q, raw)?
            }
        };
        let mut model = Self {
            mapping,
            names: Vec::new(),
            params: Vec::new(),
            running: Vec::new(),
            config,
        };
        let shapes = model.param_shapes();
        for (name, (r, c)) in shapes {
            let t = if name.ends_with(".weight") {
                glorot(r, c, &mut rng)
            } else if name.ends_with(".right") {
                Tensor::identity(r)
            } else if name.ends_with(".gamma") {
                Tensor::filled(r, c, 1.0)
            } else {
                Tensor::zeros(r, c)
            };
            model.names.push(name);
            model.params.push(t);
        }
        model.running = model
            .config
            .hidden_widths()
            .iter()
            .filter(|_| model.config.batchnorm)
            .map(|&w| RunningStats {
                mean: vec![0.0; w],
                var: vec![1.0; w],
            })
            .collect();
        Ok(model)
    }

    /// Names and shapes of the trainable parameters implied by the config.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        shapes_for(&self.config)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mapping(&self) -> &FeatureMapping {
        &self.mapping
    }

    pub fn delta(&self) -> f64 {
        self.config.delta
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn layer_slots(&self) -> Vec<LayerSlots> {
        let mut slots = Vec::new();
        let mut i = 0;
        for _ in self.config.hidden_widths() {
            let weight = i;
            i += 1;
            let right = self.config.two_sided_update.then(|| {
                i += 1;
                i - 1
            });
            let bias = (!self.config.batchnorm).then(|| {
                i += 1;
                i - 1
            });
            let bn = self.config.batchnorm.then(|| {
                i += 2;
                (i - 2, i - 1)
            });
            slots.push(LayerSlots {
                weight,
                right,
                bias,
                bn,
            });
        }
        slots
    }

    /// Records the network on `tape`. `features` holds one or more stacked
    /// graphs of `ctx.num_nodes()` rows each.
    pub fn forward(&self, tape: &mut Tape, ctx: &GraphContext, features: &Tensor, mode: Mode) -> Result<ForwardPass> {
        if features.cols() != self.config.input_width() {
            return Err(Error::DimensionMismatch {
                context: "node feature width",
                expected: self.config.input_width(),
                actual: features.cols(),
            });
        }
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(p.clone()))
            .collect::<Result<_>>()?;
        let x = tape.constant(features.clone())?;
        let mut h = self.mapping.apply(tape, x)?;
        let mut batch_stats = Vec::new();
        for (layer, slots) in self.layer_slots().iter().enumerate() {
            let agg = if layer == 0 { &ctx.first } else { &ctx.rest };
            let step = |tape: &mut Tape, h: Var| -> Result<(Var, Option<BatchStats>)> {
                let nbr = tape.aggregate_mean(h, agg.clone())?;
                let cat = tape.concat_cols(h, nbr)?;
                let mut z = tape.matmul(cat, params[slots.weight])?;
                if let Some(r) = slots.right {
                    z = tape.matmul(z, params[r])?;
                }
                if let Some(b) = slots.bias {
                    z = tape.add_row(z, params[b])?;
                }
                let mut stats = None;
                if let Some((g, b)) = slots.bn {
                    z = match mode {
                        Mode::Train => {
                            let (out, s) = tape.batchnorm_train(z, params[g], params[b])?;
                            stats = Some(s);
                            out
                        }
                        Mode::Eval => {
                            let rs = &self.running[layer];
                            tape.batchnorm_eval(z, params[g], params[b], &rs.mean, &rs.var)?
                        }
                    };
                }
                Ok((tape.sin(z)?, stats))
            };
            let (next, stats) = step(tape, h).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteActivation { layer: layer + 1 },
                other => other,
            })?;
            batch_stats.extend(stats);
            h = next;
        }
        let n = params.len();
        let out = tape.matmul(h, params[n - 2])?;
        let output = tape.add_row(out, params[n - 1])?;
        Ok(ForwardPass {
            output,
            params,
            batch_stats,
        })
    }

    /// Eval-mode output column for `features`.
    pub fn predict(&self, ctx: &GraphContext, features: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, ctx, features, Mode::Eval)?;
        Ok(tape.value(pass.output).data().to_vec())
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) {
        for (rs, s) in self.running.iter_mut().zip(stats) {
            for (r, b) in rs.mean.iter_mut().zip(&s.mean) {
                *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * b;
            }
            for (r, b) in rs.var.iter_mut().zip(&s.var_unbiased) {
                *r = (1.0 - BATCHNORM_MOMENTUM) * *r + BATCHNORM_MOMENTUM * b;
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let entry = |name: &str, t: &Tensor| ParamEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            data: t.data().to_vec(),
        };
        let mut buffers = Vec::new();
        for (l, rs) in self.running.iter().enumerate() {
            let w = rs.mean.len();
            buffers.push(ParamEntry {
                name: format!("bn{}.running_mean", l + 1),
                shape: [1, w],
                data: rs.mean.clone(),
            });
            buffers.push(ParamEntry {
                name: format!("bn{}.running_var", l + 1),
                shape: [1, w],
                data: rs.var.clone(),
            });
        }
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.names.iter().zip(&self.params).map(|(n, t)| entry(n, t)).collect(),
            mapping: MappingEntry {
                spec: self.config.mapping,
                matrix: self.mapping.raw.as_ref().map(|t| entry("mapping", t)),
            },
            buffers,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.config.validate().map_err(|e| Error::Schema {
            pointer: "/config".into(),
            message: e.to_string(),
        })?;
        let expected = shapes_for(&ck.config);
        if expected.len() != ck.params.len() {
            return Err(Error::Schema {
                pointer: "/params".into(),
                message: format!("expected {} parameter arrays, found {}", expected.len(), ck.params.len()),
            });
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (i, ((name, (r, c)), entry)) in expected.into_iter().zip(ck.params).enumerate() {
            let pointer = format!("/params/{i}");
            if entry.name != name || entry.shape != [r, c] {
                return Err(Error::Schema {
                    pointer,
                    message: format!(
                        "layer `{name}` expects shape [{r}, {c}], found `{}` with shape {:?}",
                        entry.name, entry.shape
                    ),
                });
            }
            params.push(entry_tensor(&entry, &pointer)?);
            names.push(name);
        }
        let q = ck.config.input_width();
        let mapping = match (ck.config.mapping, ck.mapping.matrix) {
            (MappingSpec::None, _) => FeatureMapping::none(),
            (spec, Some(entry)) => {
                let rows = if matches!(spec, MappingSpec::Gamma1 { .. }) { q } else { 1 };
                let m = ck.config.mapping_size();
                if entry.shape != [rows, m] {
                    return Err(Error::Schema {
                        pointer: "/mapping/matrix".into(),
                        message: format!("mapping expects shape [{rows}, {m}], found {:?}", entry.shape),
                    });
                }
                FeatureMapping::from_raw(spec, q, entry_tensor(&entry, "/mapping/matrix")?)?
            }
            (_, None) => {
                return Err(Error::Schema {
                    pointer: "/mapping/matrix".into(),
                    message: "mapping matrix missing".into(),
                })
            }
        };
        let widths = ck.config.hidden_widths().to_vec();
        let mut running = Vec::new();
        if ck.config.batchnorm {
            if ck.buffers.len() != 2 * widths.len() {
                return Err(Error::Schema {
                    pointer: "/buffers".into(),
                    message: format!("expected {} running-stat arrays, found {}", 2 * widths.len(), ck.buffers.len()),
                });
            }
            for (l, &w) in widths.iter().enumerate() {
                let (m, v) = (&ck.buffers[2 * l], &ck.buffers[2 * l + 1]);
                for (k, e) in [(2 * l, m), (2 * l + 1, v)] {
                    if e.shape != [1, w] || e.data.len() != w {
                        return Err(Error::Schema {
                            pointer: format!("/buffers/{k}"),
                            message: format!("running stats of layer {} must have {w} entries", l + 1),
                        });
                    }
                }
                running.push(RunningStats {
                    mean: m.data.clone(),
                    var: v.data.clone(),
                });
            }
        }
        Ok(Self {
            config: ck.config,
            mapping,
            names,
            params,
            running,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.to_checkpoint())?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut de = serde_json::Deserializer::from_reader(BufReader::new(file));
        let ck: Checkpoint = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
            pointer: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        Self::from_checkpoint(ck)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn shapes_for(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut d_in = config.first_layer_input();
    for (l, &w) in config.hidden_widths().iter().enumerate() {
        let l = l + 1;
        out.push((format!("sage{l}.weight"), (2 * d_in, w)));
        if config.two_sided_update {
            out.push((format!("sage{l}.right"), (w, w)));
        }
        if config.batchnorm {
            // batchnorm's beta takes the place of the layer bias
            out.push((format!("bn{l}.gamma"), (1, w)));
            out.push((format!("bn{l}.beta"), (1, w)));
        } else {
            out.push((format!("sage{l}.bias"), (1, w)));
        }
        d_in = w;
    }
    out.push(("readout.weight".into(), (d_in, 1)));
    out.push(("readout.bias".into(), (1, 1)));
    out
}

fn entry_tensor(entry: &ParamEntry, pointer: &str) -> Result<Tensor> {
    let [r, c] = entry.shape;
    if entry.data.len() != r * c {
        return Err(Error::Schema {
            pointer: format!("{pointer}/data"),
            message: format!(
                "corrupted array `{}`: {} values for shape [{r}, {c}]",
                entry.name,
                entry.data.len()
            ),
        });
    }
    Tensor::from_vec(r, c, entry.data.clone())
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    #[serde(flatten)]
    pub spec: MappingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<ParamEntry>,
}

/// On-disk model: config, trainable arrays, frozen mapping, and batchnorm
/// running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub mapping: MappingEntry,
    #[serde(default)]
    pub buffers: Vec<ParamEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphrep::GraphTopology;

    const WIDE: EdgeFeatureKind = EdgeFeatureKind::Distance { eps: 1.05, l_max: 3.0 };

    fn config(arch: &str) -> ModelConfig {
        ModelConfig::new(arch.parse().unwrap())
    }

    fn nine_node_graph() -> (Vec<[f64; 2]>, Vec<(usize, usize)>) {
        let coords = vec![
            [0.0, 0.0],
            [0.45, 0.1],
            [1.0, 0.0],
            [0.05, 0.55],
            [0.5, 0.5],
            [0.95, 0.45],
            [0.0, 1.0],
            [0.55, 0.9],
            [1.0, 1.0],
        ];
        let mut pairs = Vec::new();
        for r in 0..3 {
            for c in 0..3 {
                let i = 3 * r + c;
                if c < 2 {
                    pairs.push((i, i + 1));
                }
                if r < 2 {
                    pairs.push((i, i + 3));
                }
                if c < 2 && r < 2 {
                    pairs.push((i, i + 4));
                }
            }
        }
        (coords, pairs)
    }

    fn context(coords: &[[f64; 2]], pairs: &[(usize, usize)], kind: EdgeFeatureKind) -> GraphContext {
        let topo = Arc::new(GraphTopology::from_pairs(coords, pairs.iter().copied()).unwrap());
        GraphContext::new(topo, kind).unwrap()
    }

    #[test]
    fn architecture_round_trip() {
        let a: Architecture = "2+40+256x5+1".parse().unwrap();
        assert_eq!(a.widths(), &[2, 40, 256, 256, 256, 256, 256, 1]);
        assert_eq!(a.to_string(), "2+40+256x5+1");
        let b: Architecture = "3+512×5+1".parse().unwrap();
        assert_eq!(b.to_string(), "3+512x5+1");
        assert!("2+128x5+2".parse::<Architecture>().is_err());
        assert!("2+abc+1".parse::<Architecture>().is_err());
        assert!("2+1".parse::<Architecture>().is_err());
    }

    #[test]
    fn case1_parameter_count() {
        let model = Model::init(config("2+128x5+1")).unwrap();
        let widths = [2usize, 128, 128, 128, 128, 128];
        let sage: usize = widths.windows(2).map(|w| 2 * w[0] * w[1] + w[1]).sum();
        let readout = 128 + 1;
        assert_eq!(model.num_params(), sage + readout);
        assert_eq!(model.num_params(), 132_353);
    }

    #[test]
    fn mapping_widths() {
        let mut c = config("2+20+256x5+1");
        c.mapping = MappingSpec::Gamma1 { sigma: 2.0 };
        assert_eq!(c.mapping_size(), 10);
        assert_eq!(c.first_layer_input(), 20);
        let mut c = config("2+40+256x5+1");
        c.mapping = MappingSpec::Gamma2 { sigma: 3.0 };
        assert_eq!(c.mapping_size(), 10);
        c.validate().unwrap();
        let mut bad = config("2+42+256x5+1");
        bad.mapping = MappingSpec::Gamma2 { sigma: 3.0 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_features_map_to_cos_ones_sin_zeros() {
        for spec in [MappingSpec::Gamma1 { sigma: 2.0 }, MappingSpec::Gamma2 { sigma: 3.0 }] {
            let mut c = config("2+40+8+1");
            c.mapping = spec;
            let model = Model::init(c).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(3, 2)).unwrap();
            let y = model.mapping().apply(&mut tape, x).unwrap();
            let y = tape.value(y);
            assert_eq!(y.shape(), (3, 40));
            for r in 0..3 {
                assert!(y.row(r)[..20].iter().all(|&v| v == 1.0));
                assert!(y.row(r)[20..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn gamma2_is_kronecker_product() {
        let raw = Tensor::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let m = FeatureMapping::from_raw(MappingSpec::Gamma2 { sigma: 1.0 }, 2, raw).unwrap();
        let mut tape = Tape::new();
        let f = [0.3, -0.7];
        let x = tape.constant(Tensor::from_vec(1, 2, f.to_vec()).unwrap()).unwrap();
        let y = m.apply(&mut tape, x).unwrap();
        let kron = [0.5 * f[0], 0.5 * f[1], -f[0], -f[1], 2.0 * f[0], 2.0 * f[1]];
        let y = tape.value(y).row(0).to_vec();
        for (k, z) in kron.iter().enumerate() {
            assert!((y[k] - z.cos()).abs() < 1e-15);
            assert!((y[6 + k] - z.sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn mapping_sample_std_close_to_sigma() {
        let mut c = config("2+20000+4+1");
        c.mapping = MappingSpec::Gamma1 { sigma: 3.0 };
        let model = Model::init(c).unwrap();
        let raw = model.mapping().raw.as_ref().unwrap();
        assert!(raw.len() >= 10_000);
        let n = raw.len() as f64;
        let mean = raw.data().iter().sum::<f64>() / n;
        let std = (raw.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / 3.0 - 1.0).abs() < 0.05, "{std}");
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = Model::init(config("2+16x3+1")).unwrap();
        let b = Model::init(config("2+16x3+1")).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.param_names().iter().zip(a.params()) {
            if name.ends_with(".weight") {
                let bound = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            } else {
                assert!(t.data().iter().all(|&v| v == 0.0));
            }
        }
        let mut other = config("2+16x3+1");
        other.seed = 1;
        assert_ne!(Model::init(other).unwrap().params(), a.params());
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let (coords, pairs) = nine_node_graph();
        let ctx = context(&coords, &pairs, EdgeFeatureKind::Uniform);
        let mut model = Model::init(config("2+8x2+1")).unwrap();
        let n = model.params().len();
        for p in model.params_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        model.params_mut()[n - 1] = Tensor::scalar(0.75);
        let out = model.predict(&ctx, &node_features(&ctx.topo, &[]).unwrap()).unwrap();
        assert!(out.iter().all(|&v| v == 0.75));
    }

    #[test]
    fn permutation_equivariance_is_exact() {
        let (coords, pairs) = nine_node_graph();
        let perm = [4usize, 7, 0, 8, 2, 6, 1, 3, 5];
        let mut pcoords = vec![[0.0; 2]; 9];
        for (i, &p) in perm.iter().enumerate() {
            pcoords[p] = coords[i];
        }
        let ppairs: Vec<_> = pairs.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let mut c = config("2+20+12x3+1");
        c.mapping = MappingSpec::Gamma1 { sigma: 1.0 };
        c.edge_feature = WIDE;
        let model = Model::init(c).unwrap();
        let ctx = context(&coords, &pairs, WIDE);
        let pctx = context(&pcoords, &ppairs, WIDE);
        let out = model.predict(&ctx, &node_features(&ctx.topo, &[]).unwrap()).unwrap();
        let pout = model.predict(&pctx, &node_features(&pctx.topo, &[]).unwrap()).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(out[i].to_bits(), pout[p].to_bits());
        }
    }

    #[test]
    fn batched_forward_matches_single_graphs() {
        let (coords, pairs) = nine_node_graph();
        let ctx = context(&coords, &pairs, EdgeFeatureKind::Uniform);
        let mut c = config("3+10x2+1");
        c.seed = 5;
        let model = Model::init(c).unwrap();
        let mu1: Vec<f64> = (0..9).map(|i| i as f64 * 0.1).collect();
        let mu2: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let both = model.predict(&ctx, &node_features(&ctx.topo, &[&mu1, &mu2]).unwrap()).unwrap();
        let one = model.predict(&ctx, &node_features(&ctx.topo, &[&mu1]).unwrap()).unwrap();
        let two = model.predict(&ctx, &node_features(&ctx.topo, &[&mu2]).unwrap()).unwrap();
        assert_eq!(&both[..9], &one[..]);
        assert_eq!(&both[9..], &two[..]);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (coords, pairs) = nine_node_graph();
        let ctx = context(&coords, &pairs, WIDE);
        let mut c = config("2+40+8x2+1");
        c.mapping = MappingSpec::Gamma2 { sigma: 12.0 };
        c.batchnorm = true;
        c.two_sided_update = true;
        c.edge_feature = WIDE;
        let mut model = Model::init(c).unwrap();
        model.running[0].mean[0] = 0.123456789012345;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded, model);
        let feats = node_features(&ctx.topo, &[]).unwrap();
        let a = model.predict(&ctx, &feats).unwrap();
        let b = loaded.predict(&ctx, &feats).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_shape_mismatch_names_layer() {
        let model = Model::init(config("2+8x2+1")).unwrap();
        let mut ck = model.to_checkpoint();
        ck.config.architecture = "2+8+6+1".parse().unwrap();
        let err = Model::from_checkpoint(ck).unwrap_err();
        match err {
            Error::Schema { pointer, message } => {
                assert_eq!(pointer, "/params/2");
                assert!(message.contains("sage2.weight"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut ck = model.to_checkpoint();
        ck.params[0].data.pop();
        assert!(matches!(Model::from_checkpoint(ck), Err(Error::Schema { .. })));
        let mut ck = model.to_checkpoint();
        ck.version = 2;
        assert!(matches!(Model::from_checkpoint(ck), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut c = config("2+4+1");
        c.batchnorm = true;
        let mut model = Model::init(c).unwrap();
        model.update_running_stats(&[BatchStats {
            mean: vec![1.0; 4],
            var_unbiased: vec![3.0; 4],
        }]);
        assert!((model.running_stats()[0].mean[0] - 0.1).abs() < 1e-15);
        assert!((model.running_stats()[0].var[0] - 1.2).abs() < 1e-15);
    }
}
