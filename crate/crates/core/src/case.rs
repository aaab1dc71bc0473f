//! JSON case definitions: mesh source, PDE coefficients from a named field
//! registry, model and training settings, and the validation reference.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{fem_solve_dirichlet, Field, P2Space, PdeCoefficients, Source};
use crate::graphrep::{graph_from_space, GraphTopology};
use crate::grf::{grf_dataset, GrfConfig};
use crate::mesh::{
    generate_grid_with_centers, generate_rectangle, generate_slit_square, refine_toward, refine_uniform, BBox, Mesh,
    Point,
};
use crate::model::{GraphContext, ModelConfig};
use crate::physics::ResidualSystem;
use crate::training::{Problem, Sample, TrainConfig};

/// A scalar field: a constant or a registry entry with named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Constant(f64),
    Named {
        name: String,
        #[serde(flatten)]
        params: BTreeMap<String, f64>,
    },
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Constant(0.0)
    }
}

impl From<f64> for FieldSpec {
    fn from(c: f64) -> Self {
        FieldSpec::Constant(c)
    }
}

/// Names accepted by [`FieldSpec::Named`].
pub const FIELD_REGISTRY: &[&str] = &["case2_peak", "case2_source", "case3_source", "sin_kx", "sin_sin"];

impl FieldSpec {
    pub fn named(name: &str, params: &[(&str, f64)]) -> Self {
        FieldSpec::Named {
            name: name.into(),
            params: params.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn is_grf(&self) -> bool {
        matches!(self, FieldSpec::Named { name, .. } if name == "grf")
    }

    /// Resolves the spec to an evaluable field.
    pub fn to_field(&self) -> Result<Field> {
        let (name, params) = match self {
            FieldSpec::Constant(c) => return Ok(Field::Constant(*c)),
            FieldSpec::Named { name, params } => (name.as_str(), params),
        };
        let get = |key: &str, default: Option<f64>| -> Result<f64> {
            params
                .get(key)
                .copied()
                .or(default)
                .ok_or_else(|| Error::InvalidArgument(format!("field `{name}` needs parameter `{key}`")))
        };
        let allowed: &[&str] = match name {
            "case2_peak" | "case2_source" => &["x0", "y0", "a"],
            "case3_source" => &["alpha1", "alpha2"],
            "sin_kx" => &["k"],
            "sin_sin" => &["alpha1", "alpha2"],
            "grf" => {
                return Err(Error::InvalidArgument(
                    "`grf` is a parametric source and has no fixed field".into(),
                ))
            }
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown field `{other}`; known fields: {}",
                    FIELD_REGISTRY.join(", ")
                )))
            }
        };
        if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::InvalidArgument(format!("field `{name}` has no parameter `{bad}`")));
        }
        Ok(match name {
            "case2_peak" | "case2_source" => {
                let (x0, y0, a) = (get("x0", Some(0.5))?, get("y0", Some(0.5))?, get("a", Some(1000.0))?);
                let peak = move |p: Point| (-a * ((p[0] - x0).powi(2) + (p[1] - y0).powi(2))).exp();
                if name == "case2_peak" {
                    Field::analytic(peak)
                } else {
                    // s = -laplacian(peak)
                    Field::analytic(move |p| {
                        let r2 = (p[0] - x0).powi(2) + (p[1] - y0).powi(2);
                        -peak(p) * (4.0 * a * a * r2 - 4.0 * a)
                    })
                }
            }
            "case3_source" => {
                let (a1, a2) = (get("alpha1", None)?, get("alpha2", None)?);
                let c = (a1 * a1 + a2 * a2 + 1.0) * PI * PI;
                Field::analytic(move |p| c * (a1 * PI * p[0]).sin() * (a2 * PI * p[1]).sin())
            }
            "sin_kx" => {
                let k = get("k", None)?;
                Field::analytic(move |p| (k * p[0]).sin())
            }
            "sin_sin" => {
                let (a1, a2) = (get("alpha1", None)?, get("alpha2", None)?);
                Field::analytic(move |p| (a1 * PI * p[0]).sin() * (a2 * PI * p[1]).sin())
            }
            _ => unreachable!(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalRefinement {
    pub center: Point,
    pub radius: f64,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeshSource {
    Rectangle {
        nx: usize,
        ny: usize,
        min: Point,
        max: Point,
    },
    GridWithCenters {
        nx: usize,
        ny: usize,
        min: Point,
        max: Point,
        inset: usize,
    },
    SlitSquare {
        n: usize,
        #[serde(default = "one")]
        half_width: f64,
    },
    /// Mesh JSON or Gmsh `.msh` file, relative to the config file.
    File { path: PathBuf },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSpec {
    pub source: MeshSource,
    #[serde(default)]
    pub refine: Vec<LocalRefinement>,
    #[serde(default)]
    pub uniform_refinements: usize,
}

impl MeshSpec {
    pub fn build(&self, base_dir: &Path) -> Result<Mesh> {
        let mut mesh = match &self.source {
            MeshSource::Rectangle { nx, ny, min, max } => generate_rectangle(*nx, *ny, BBox::new(*min, *max)?)?,
            MeshSource::GridWithCenters { nx, ny, min, max, inset } => {
                generate_grid_with_centers(*nx, *ny, BBox::new(*min, *max)?, *inset)?
            }
            MeshSource::SlitSquare { n, half_width } => generate_slit_square(*n, *half_width)?,
            MeshSource::File { path } => {
                let path = base_dir.join(path);
                if path.extension().is_some_and(|e| e == "msh") {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    Mesh::from_msh(&text)?
                } else {
                    Mesh::load(&path)?
                }
            }
        };
        for r in &self.refine {
            mesh = refine_toward(&mesh, r.center, r.radius, r.levels)?;
        }
        for _ in 0..self.uniform_refinements {
            mesh = refine_uniform(&mesh)?;
        }
        Ok(mesh)
    }
}

fn default_tags() -> Vec<i32> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSpec {
    #[serde(default = "kappa_one")]
    pub kappa: FieldSpec,
    #[serde(default)]
    pub beta: FieldSpec,
    /// Volume source `s`; `{"name": "grf"}` makes the case parametric with
    /// `s = -mu` for a GRF sample `mu`.
    #[serde(default)]
    pub source: FieldSpec,
    /// Dirichlet value `g`.
    #[serde(default)]
    pub dirichlet: FieldSpec,
    #[serde(default = "default_tags")]
    pub dirichlet_tags: Vec<i32>,
    #[serde(default)]
    pub neumann_flux: Option<FieldSpec>,
}

fn kappa_one() -> FieldSpec {
    FieldSpec::Constant(1.0)
}

/// Where validation references come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// FEM on the training mesh refined uniformly `levels` times, evaluated
    /// at the training nodes.
    RefinedFem { levels: usize },
    /// Analytic solution sampled at the nodes.
    Exact { field: FieldSpec },
    /// FEM on the training mesh itself.
    SameMeshFem,
    None,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::RefinedFem { levels: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub name: String,
    pub mesh: MeshSpec,
    pub pde: PdeSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub grf: Option<GrfConfig>,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    /// Directory relative paths resolve against; set by [`CaseConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CaseConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: CaseConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
            pointer: json_pointer(&e.path().to_string()),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if let MeshSource::File { path: mesh } = &cfg.mesh.source {
            let full = cfg.base_dir.join(mesh);
            if !full.exists() {
                return Err(Error::Schema {
                    pointer: "/mesh/source/path".into(),
                    message: format!("mesh file {} does not exist", full.display()),
                });
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn is_parametric(&self) -> bool {
        self.pde.source.is_grf()
    }

    pub fn validate(&self) -> Result<()> {
        let schema = |pointer: &str, e: Error| Error::Schema {
            pointer: pointer.into(),
            message: e.to_string(),
        };
        self.model.validate().map_err(|e| schema("/model", e))?;
        self.train.validate().map_err(|e| schema("/train", e))?;
        for (ptr, f) in [("/pde/kappa", &self.pde.kappa), ("/pde/beta", &self.pde.beta), ("/pde/dirichlet", &self.pde.dirichlet)] {
            f.to_field().map_err(|e| schema(ptr, e))?;
        }
        if let Some(q) = &self.pde.neumann_flux {
            q.to_field().map_err(|e| schema("/pde/neumann_flux", e))?;
        }
        if let ReferenceSpec::Exact { field } = &self.reference {
            field.to_field().map_err(|e| schema("/reference/field", e))?;
        }
        let q = self.model.input_width();
        if self.is_parametric() {
            let grf = self.grf.as_ref().ok_or_else(|| Error::Schema {
                pointer: "/grf".into(),
                message: "a `grf` source needs a grf section".into(),
            })?;
            grf.validate().map_err(|e| schema("/grf", e))?;
            if self.dataset.is_none() {
                return Err(Error::Schema {
                    pointer: "/dataset".into(),
                    message: "a `grf` source needs a dataset section".into(),
                });
            }
            if q != 3 {
                return Err(Error::Schema {
                    pointer: "/model/architecture".into(),
                    message: format!("parametric cases take 3 input features, architecture has {q}"),
                });
            }
        } else {
            self.pde.source.to_field().map_err(|e| schema("/pde/source", e))?;
            if q != 2 {
                return Err(Error::Schema {
                    pointer: "/model/architecture".into(),
                    message: format!("non-parametric cases take 2 input features, architecture has {q}"),
                });
            }
        }
        Ok(())
    }

    /// Coefficients for a fixed source, or with `s = -mu` for a nodal `mu`.
    pub fn coefficients(&self, mu: Option<&[f64]>) -> Result<PdeCoefficients> {
        let source = match mu {
            Some(mu) => Source::Nodal(mu.iter().map(|v| -v).collect()),
            None if self.is_parametric() => Source::Nodal(Vec::new()),
            None => Source::Field(self.pde.source.to_field()?),
        };
        let mut c = PdeCoefficients::new(self.pde.kappa.to_field()?, self.pde.beta.to_field()?, source);
        if let Some(q) = &self.pde.neumann_flux {
            c = c.with_neumann(q.to_field()?);
        }
        Ok(c)
    }

    pub fn build_space(&self) -> Result<P2Space> {
        let mesh = self.mesh.build(&self.base_dir)?;
        Ok(P2Space::new(Arc::new(mesh), &self.pde.dirichlet_tags, self.pde.dirichlet.to_field()?))
    }

    /// Mesh, space, graph, and residual system for this case.
    pub fn setup(&self) -> Result<CaseSetup> {
        let space = Arc::new(self.build_space()?);
        let topo = Arc::new(graph_from_space(&space, self.model.adjacency)?);
        let ctx = GraphContext::new(topo, self.model.edge_feature)?;
        let coeffs = if self.is_parametric() {
            // operator only; the load is replaced per sample
            self.coefficients(Some(&vec![0.0; space.num_nodes()]))?
        } else {
            self.coefficients(None)?
        };
        let system = Arc::new(ResidualSystem::build(&space, &coeffs, self.model.delta)?);
        Ok(CaseSetup {
            config: self.clone(),
            space,
            ctx,
            coeffs,
            system,
        })
    }
}

/// Converts a `serde_path_to_error` path (`a.b[0]`) to a JSON pointer.
fn json_pointer(path: &str) -> String {
    if path == "." {
        return String::new();
    }
    let mut out = String::new();
    for part in path.split('.') {
        let mut rest = part;
        while let Some(i) = rest.find('[') {
            if i > 0 {
                out.push('/');
                out.push_str(&rest[..i]);
            }
            let j = rest[i..].find(']').map(|j| i + j).unwrap_or(rest.len() - 1);
            out.push('/');
            out.push_str(&rest[i + 1..j]);
            rest = &rest[j + 1..];
        }
        if !rest.is_empty() {
            out.push('/');
            out.push_str(rest);
        }
    }
    out
}

pub struct CaseSetup {
    pub config: CaseConfig,
    pub space: Arc<P2Space>,
    pub ctx: GraphContext,
    pub coeffs: PdeCoefficients,
    pub system: Arc<ResidualSystem>,
}

impl CaseSetup {
    pub fn topology(&self) -> &GraphTopology {
        &self.ctx.topo
    }

    /// Validation reference at the training nodes, per the config.
    pub fn reference_solution(&self) -> Result<Option<Vec<f64>>> {
        match &self.config.reference {
            ReferenceSpec::None => Ok(None),
            ReferenceSpec::Exact { field } => Ok(Some(self.space.interpolate_field(&field.to_field()?))),
            ReferenceSpec::SameMeshFem => Ok(Some(fem_solve_dirichlet(&self.space, &self.coeffs)?)),
            ReferenceSpec::RefinedFem { levels } => {
                if self.config.is_parametric() {
                    return Err(Error::InvalidArgument("parametric cases use per-sample references".into()));
                }
                let mut mesh = self.space.mesh().clone();
                for _ in 0..*levels {
                    mesh = refine_uniform(&mesh)?;
                }
                let fine = P2Space::new(
                    Arc::new(mesh),
                    &self.config.pde.dirichlet_tags,
                    self.config.pde.dirichlet.to_field()?,
                );
                let u = fem_solve_dirichlet(&fine, &self.coeffs)?;
                let mut values = fine.evaluate_at(&u, self.space.nodes())?;
                // Dirichlet nodes take the exact boundary samples
                for (&n, &g) in self.space.dirichlet_nodes().iter().zip(self.space.dirichlet_values()) {
                    values[n] = g;
                }
                Ok(Some(values))
            }
        }
    }

    /// Non-parametric training problem with its validation reference.
    pub fn problem(&self) -> Result<Problem> {
        Ok(Problem {
            ctx: self.ctx.clone(),
            system: self.system.clone(),
            reference: self.reference_solution()?,
        })
    }

    /// GRF source vectors at the nodes, seeds `seed..seed + count`.
    pub fn grf_sources(&self, r: Option<f64>, count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let mut grf = self
            .config
            .grf
            .ok_or_else(|| Error::InvalidArgument("case has no grf section".into()))?;
        if let Some(r) = r {
            grf.r = r;
        }
        let bbox = self.space.mesh().bbox();
        let w = [bbox.max[0] - bbox.min[0], bbox.max[1] - bbox.min[1]];
        let unit: Vec<Point> = self
            .space
            .nodes()
            .iter()
            .map(|p| [(p[0] - bbox.min[0]) / w[0], (p[1] - bbox.min[1]) / w[1]])
            .collect();
        grf_dataset(&grf, &unit, count, seed)
    }

    /// Parametric samples for the given sources.
    pub fn samples(&self, mus: Vec<Vec<f64>>, with_reference: bool) -> Result<Vec<Sample>> {
        mus.into_iter()
            .map(|mu| {
                let coeffs = self.config.coefficients(Some(&mu))?;
                Sample::new(&self.space, &self.system, mu, coeffs, with_reference)
            })
            .collect()
    }

    /// Train / validation / test splits with disjoint seed ranges drawn
    /// from the dataset master seed.
    pub fn dataset_splits(&self, r: Option<f64>) -> Result<[Vec<Sample>; 3]> {
        let d = self
            .config
            .dataset
            .ok_or_else(|| Error::InvalidArgument("case has no dataset section".into()))?;
        let seed = d.seed;
        let train = self.grf_sources(r, d.train.max(1), seed)?;
        let val = self.grf_sources(r, d.val.max(1), seed + d.train as u64)?;
        let test = self.grf_sources(r, d.test.max(1), seed + (d.train + d.val) as u64)?;
        let supervised = self.config.train.mode == crate::training::TrainMode::Supervised;
        Ok([
            self.samples(train.into_iter().take(d.train).collect(), supervised)?,
            self.samples(val.into_iter().take(d.val).collect(), true)?,
            self.samples(test.into_iter().take(d.test).collect(), true)?,
        ])
    }
}
