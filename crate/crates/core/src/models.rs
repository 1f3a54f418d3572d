//! The four model systems: mobility with its derivative, energy and
//! splitting, box constraint and initial data.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::constraint::BoxConstraint;
use crate::dense::SymMat;
use crate::energy::{Confinement, ConvexSplit, EnergySpec, InternalTerm, PrecondTerm};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::state::SpeciesField;

/// Names accepted by [`Model::by_name`].
pub const MODEL_NAMES: [&str; 4] = ["skt", "surfactant", "two_layer_film", "saturation_fp"];

/// Concentration dependent mobility `M(mu)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mobility {
    /// Shigesada-Kawasaki-Teramoto population model.
    Skt,
    /// Surfactant on a thin film, with regularizing constant `eps`.
    Surfactant { eps: f64 },
    /// Two stacked liquid layers.
    TwoLayerFilm,
    /// Diagonal mobility with saturation `1 - mu_1 - mu_2`.
    Saturation,
    /// `diag(mu)`, the saturation model with the saturation switched off.
    Linear,
}

impl Mobility {
    pub fn species(&self) -> usize {
        2
    }

    pub fn eval(&self, mu: &[f64]) -> SymMat {
        unpack(self.eval_packed(mu))
    }

    /// `M(mu)` as `(m11, m12, m22)`.
    pub fn eval_packed(&self, mu: &[f64]) -> [f64; 3] {
        let (u, v) = (mu[0], mu[1]);
        match *self {
            Mobility::Skt => [u * (2.0 * u + v), u * v, v * (u + 2.0 * v)],
            Mobility::Surfactant { eps } => [u * u * u / 3.0, u * u * v / 2.0, u * v * v + eps * v],
            Mobility::TwoLayerFilm => {
                let r = v - u;
                let m11 = u * u * u / 3.0;
                [m11, m11 + u * u * r / 2.0, r * r * r / 3.0 + u * v * r + m11]
            }
            Mobility::Saturation => {
                let s = 1.0 - u - v;
                [u * s, 0.0, v * s]
            }
            Mobility::Linear => [u, 0.0, v],
        }
    }

    /// Partial derivatives `dM/dmu_alpha`, one matrix per species.
    pub fn partials(&self, mu: &[f64]) -> SmallVec<[SymMat; 2]> {
        self.partials_packed(mu).into_iter().map(unpack).collect()
    }

    /// [`Mobility::partials`] in the packed layout of [`Mobility::eval_packed`].
    pub fn partials_packed(&self, mu: &[f64]) -> [[f64; 3]; 2] {
        let (u, v) = (mu[0], mu[1]);
        match *self {
            Mobility::Skt => [[4.0 * u + v, v, v], [u, u, u + 4.0 * v]],
            Mobility::Surfactant { eps } => [[u * u, u * v, v * v], [0.0, u * u / 2.0, 2.0 * u * v + eps]],
            Mobility::TwoLayerFilm => {
                let r = v - u;
                let d1_12 = -u * u / 2.0 + u * v;
                let d2_12 = u * u / 2.0;
                let d1_22 = -r * r + v * r - u * v + u * u;
                let d2_22 = r * r + u * r + u * v;
                [[u * u, d1_12, d1_22], [0.0, d2_12, d2_22]]
            }
            Mobility::Saturation => {
                let s = 1.0 - u - v;
                [[s - u, 0.0, -v], [-u, 0.0, s - v]]
            }
            Mobility::Linear => [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Directional derivative `DM(mu)[dmu]`.
    pub fn directional(&self, mu: &[f64], dmu: &[f64]) -> SymMat {
        unpack(self.directional_packed(mu, dmu))
    }

    pub fn directional_packed(&self, mu: &[f64], dmu: &[f64]) -> [f64; 3] {
        let [p, q] = self.partials_packed(mu);
        std::array::from_fn(|k| p[k] * dmu[0] + q[k] * dmu[1])
    }
}

fn unpack([a, b, c]: [f64; 3]) -> SymMat {
    SymMat::from_rows(&[&[a, b], &[b, c]])
}

/// Which of the four systems a [`Model`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Skt,
    Surfactant,
    TwoLayerFilm,
    SaturationFp,
}

/// One tunable model parameter and whether its default is part of the model definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: f64,
    pub standard: bool,
}

/// Default discretization of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunDefaults {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
    pub tau: f64,
    pub steps: usize,
    /// Dual-to-primal step ratio for the saddle solver (a tuning choice).
    pub step_ratio: f64,
}

/// A model system with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub kind: ModelKind,
    pub dim: usize,
    pub params: Vec<Param>,
}

fn param(name: &str, value: f64, standard: bool) -> Param {
    Param {
        name: name.to_string(),
        value,
        standard,
    }
}

fn gaussian(x: f64, y: f64) -> f64 {
    (-(x * x + y * y) / 2.0).exp() / (2.0 * PI).sqrt()
}

impl Model {
    /// Cross-diffusion population model in one or two dimensions.
    pub fn skt(dim: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::Config(format!("the SKT model supports dimension 1 or 2, not {dim}")));
        }
        Ok(Self {
            kind: ModelKind::Skt,
            dim,
            params: Vec::new(),
        })
    }

    /// Surfactant spreading on a thin film.
    pub fn surfactant() -> Self {
        Self {
            kind: ModelKind::Surfactant,
            dim: 1,
            params: vec![param("eps", 1e-2, false)],
        }
    }

    /// Two-layer thin film with Lennard-Jones interaction.
    pub fn two_layer_film() -> Self {
        Self {
            kind: ModelKind::TwoLayerFilm,
            dim: 1,
            params: vec![param("eps", 0.01, true), param("sigma", 1.0, false)],
        }
    }

    /// Fokker-Planck system with saturation.
    pub fn saturation_fp() -> Self {
        Self {
            kind: ModelKind::SaturationFp,
            dim: 1,
            params: vec![
                param("a", 0.2, true),
                param("sigma1", 4.0, true),
                param("sigma2", 2.0, true),
                param("saturation", 1.0, true),
            ],
        }
    }

    pub fn by_name(name: &str, dim: usize) -> Result<Self> {
        let model = match name {
            "skt" => return Self::skt(dim),
            "surfactant" => Self::surfactant(),
            "two_layer_film" => Self::two_layer_film(),
            "saturation_fp" => Self::saturation_fp(),
            other => {
                return Err(Error::Config(format!(
                    "unknown model '{other}'; valid models are {}",
                    MODEL_NAMES.join(", ")
                )))
            }
        };
        if dim != 1 {
            return Err(Error::Config(format!("model '{name}' is one-dimensional only")));
        }
        Ok(model)
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Skt => "skt",
            ModelKind::Surfactant => "surfactant",
            ModelKind::TwoLayerFilm => "two_layer_film",
            ModelKind::SaturationFp => "saturation_fp",
        }
    }

    pub fn species(&self) -> usize {
        2
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|p| p.name == name).map(|p| p.value)
    }

    fn value(&self, name: &str) -> f64 {
        self.get(name).expect("parameter is defined for this model")
    }

    /// Overrides a parameter; unknown names are rejected.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let known: Vec<String> = self.params.iter().map(|p| p.name.clone()).collect();
        match self.params.iter_mut().find(|p| p.name == name) {
            Some(p) => {
                if !value.is_finite() {
                    return Err(Error::Config(format!("parameter {name} must be finite")));
                }
                p.value = value;
                Ok(())
            }
            None => Err(Error::Config(format!(
                "model '{}' has no parameter '{name}' (known: {})",
                self.name(),
                if known.is_empty() { "none".to_string() } else { known.join(", ") }
            ))),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        self.set(name, value)?;
        Ok(self)
    }

    pub fn mobility(&self) -> Mobility {
        match self.kind {
            ModelKind::Skt => Mobility::Skt,
            ModelKind::Surfactant => Mobility::Surfactant { eps: self.value("eps") },
            ModelKind::TwoLayerFilm => Mobility::TwoLayerFilm,
            ModelKind::SaturationFp => {
                if self.value("saturation") != 0.0 {
                    Mobility::Saturation
                } else {
                    Mobility::Linear
                }
            }
        }
    }

    pub fn energy(&self) -> EnergySpec {
        match self.kind {
            ModelKind::Skt => EnergySpec {
                species: 2,
                internal: vec![InternalTerm::Entropy { species: 0 }, InternalTerm::Entropy { species: 1 }],
                confinement: Confinement::None,
                dirichlet: vec![0.0, 0.0],
            },
            ModelKind::Surfactant => EnergySpec {
                species: 2,
                internal: vec![InternalTerm::Entropy { species: 1 }],
                confinement: Confinement::None,
                dirichlet: vec![1.0, 0.0],
            },
            ModelKind::TwoLayerFilm => EnergySpec {
                species: 2,
                internal: vec![InternalTerm::LennardJones {
                    eps: self.value("eps"),
                    plus: 1,
                    minus: 0,
                }],
                confinement: Confinement::None,
                dirichlet: vec![self.value("sigma"), 1.0],
            },
            ModelKind::SaturationFp => {
                let (s1, s2) = (self.value("sigma1"), self.value("sigma2"));
                EnergySpec {
                    species: 2,
                    internal: vec![InternalTerm::Interaction { a: self.value("a") }],
                    confinement: if s1 == 0.0 && s2 == 0.0 {
                        Confinement::None
                    } else {
                        Confinement::Harmonic { sigma: vec![s1, s2] }
                    },
                    dirichlet: vec![0.0, 0.0],
                }
            }
        }
    }

    pub fn split(&self) -> ConvexSplit {
        let identity = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        match self.kind {
            ModelKind::Skt => ConvexSplit {
                k: identity,
                terms: vec![PrecondTerm::Entropy, PrecondTerm::Entropy],
                remainder: EnergySpec::zero(2),
            },
            ModelKind::Surfactant => ConvexSplit {
                k: identity,
                terms: vec![PrecondTerm::Dirichlet { coeff: 1.0 }, PrecondTerm::Entropy],
                remainder: EnergySpec::zero(2),
            },
            ModelKind::TwoLayerFilm => ConvexSplit {
                k: vec![vec![-1.0, 1.0]],
                terms: vec![PrecondTerm::LennardJones { eps: self.value("eps") }],
                remainder: EnergySpec {
                    species: 2,
                    internal: Vec::new(),
                    confinement: Confinement::None,
                    dirichlet: vec![self.value("sigma"), 1.0],
                },
            },
            ModelKind::SaturationFp => ConvexSplit::none(self.energy()),
        }
    }

    pub fn box_constraint(&self) -> BoxConstraint {
        match self.kind {
            ModelKind::Skt => BoxConstraint::nonnegative(2),
            ModelKind::Surfactant => BoxConstraint {
                coupling: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                lo: vec![f64::NEG_INFINITY, 0.0],
                hi: vec![f64::INFINITY, f64::INFINITY],
            },
            ModelKind::TwoLayerFilm => BoxConstraint::none(),
            ModelKind::SaturationFp => BoxConstraint {
                coupling: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
                lo: vec![0.0, 0.0, f64::NEG_INFINITY],
                hi: vec![f64::INFINITY, f64::INFINITY, 1.0],
            },
        }
    }

    /// Reference run settings (grid spacing, time step, final time).
    pub fn defaults(&self) -> RunDefaults {
        match (self.kind, self.dim) {
            (ModelKind::Skt, 1) => RunDefaults { lo: -5.0, hi: 5.0, cells: 100, tau: 0.1, steps: 10, step_ratio: 10.0 },
            (ModelKind::Skt, _) => RunDefaults { lo: -5.0, hi: 5.0, cells: 256, tau: 0.1, steps: 10, step_ratio: 10.0 },
            (ModelKind::Surfactant, _) => RunDefaults { lo: -4.0, hi: 4.0, cells: 1024, tau: 0.1, steps: 10, step_ratio: 1.0 },
            (ModelKind::TwoLayerFilm, _) => RunDefaults { lo: -1.0, hi: 1.0, cells: 100, tau: 1e-4, steps: 5000, step_ratio: 1.0 },
            (ModelKind::SaturationFp, _) => RunDefaults { lo: -1.0, hi: 1.0, cells: 400, tau: 0.1, steps: 100, step_ratio: 1.0 },
        }
    }

    /// Initial densities sampled at cell centres.
    pub fn initial_data(&self, grid: Grid) -> Result<SpeciesField> {
        if grid.dim() != self.dim {
            return Err(Error::Config(format!(
                "model '{}' is set up in {} dimensions, grid has {}",
                self.name(),
                self.dim,
                grid.dim()
            )));
        }
        let field = match (self.kind, self.dim) {
            (ModelKind::Skt, 1) => SpeciesField::from_fns(
                grid,
                &[&|x| gaussian(x[0] - 0.5, 0.0), &|x| gaussian(x[0] + 0.5, 0.0)],
            ),
            (ModelKind::Skt, _) => SpeciesField::from_fns(
                grid,
                &[&|x| gaussian(x[0], x[1] + 0.5), &|x| gaussian(x[0], x[1] - 0.5)],
            ),
            (ModelKind::Surfactant, _) => SpeciesField::from_fns(
                grid,
                &[&|_| 1.0, &|x| 0.5 * (1.0 - (10.0 * x[0].abs() - 5.0).tanh())],
            ),
            (ModelKind::TwoLayerFilm, _) => {
                let eps = self.value("eps");
                SpeciesField::from_fns(
                    grid,
                    &[&|x| 0.75 - 0.25 * (PI * x[0] / 2.0).cos(), &move |_| 1.0 + eps],
                )
            }
            (ModelKind::SaturationFp, _) => {
                let f = |x: f64| 0.4 * (1.0 - (4.0 * x / 3.0).powi(2));
                let w = 8.0 * PI;
                SpeciesField::from_fns(
                    grid,
                    &[
                        &|x| (f(x[0]) * (1.0 - 0.5 * (w * x[0]).cos())).max(0.0),
                        &|x| (f(x[0]) * (1.0 + 0.5 * (w * x[0]).cos())).max(0.0),
                    ],
                )
            }
        };
        Ok(field)
    }

    /// Parameters whose defaults are assumptions of this program.
    pub fn assumed_defaults(&self) -> Vec<&Param> {
        self.params.iter().filter(|p| !p.standard).collect()
    }
}
