//! Optical coefficients, scattering kernel and true source, with the three
//! reference test presets.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grid::{AngleGrid, Domain};

/// Planar shape described by a signed distance (negative inside).
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    /// Rectangle centred at `center`, rotated by `angle` radians.
    Bar {
        center: [f64; 2],
        half_length: f64,
        half_width: f64,
        angle: f64,
    },
    Union(Vec<Shape>),
}

impl Shape {
    pub fn signed_distance(&self, x: f64, y: f64) -> f64 {
        match self {
            Shape::Disk { center, radius } => (x - center[0]).hypot(y - center[1]) - radius,
            Shape::Bar {
                center,
                half_length,
                half_width,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let dx = x - center[0];
                let dy = y - center[1];
                let u = (c * dx + s * dy).abs() - half_length;
                let v = (-s * dx + c * dy).abs() - half_width;
                let outside = u.max(0.0).hypot(v.max(0.0));
                outside + u.max(v).min(0.0)
            }
            Shape::Union(parts) => parts
                .iter()
                .map(|p| p.signed_distance(x, y))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.signed_distance(x, y) < 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Edge {
    Sharp,
    /// `½(1 + tanh(-sd / width))` transition.
    Smooth {
        width: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inclusion {
    pub shape: Shape,
    pub value: f64,
    pub edge: Edge,
}

impl Inclusion {
    pub fn sharp(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            value,
            edge: Edge::Sharp,
        }
    }

    pub fn smooth(shape: Shape, value: f64, width: f64) -> Self {
        Self {
            shape,
            value,
            edge: Edge::Smooth { width },
        }
    }

    fn weight(&self, x: f64, y: f64) -> f64 {
        let sd = self.shape.signed_distance(x, y);
        match self.edge {
            Edge::Sharp => {
                if sd < 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Edge::Smooth { width } => 0.5 * (1.0 + (-sd / width).tanh()),
        }
    }
}

/// Layered piecewise field. Earlier inclusions take priority; a smooth
/// edge blends into the layers below it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PiecewiseField {
    pub background: f64,
    pub inclusions: Vec<Inclusion>,
}

impl PiecewiseField {
    pub fn constant(value: f64) -> Self {
        Self {
            background: value,
            inclusions: Vec::new(),
        }
    }

    pub fn with(mut self, inclusion: Inclusion) -> Self {
        self.inclusions.push(inclusion);
        self
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let mut acc = self.background;
        for inc in self.inclusions.iter().rev() {
            let w = inc.weight(x, y);
            acc = w * inc.value + (1.0 - w) * acc;
        }
        acc
    }

    pub fn is_zero(&self) -> bool {
        self.background == 0.0 && self.inclusions.iter().all(|i| i.value == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelShape {
    /// `K ≡ value`.
    Constant(f64),
    /// `(1/2d)(1-g²)/(1+g²-2g cos(α-β))` with spatially varying `g`.
    HenyeyGreenstein { g: PiecewiseField, d: f64 },
}

/// Scattering kernel `K(x, α, β)`, optionally rescaled per point so that its
/// discrete double integral over `[-d, d]²` is one.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub shape: KernelShape,
    normalized_on: Option<AngleGrid>,
}

impl Kernel {
    pub fn constant(value: f64) -> Self {
        Self {
            shape: KernelShape::Constant(value),
            normalized_on: None,
        }
    }

    pub fn henyey_greenstein(g: PiecewiseField, d: f64) -> Self {
        Self {
            shape: KernelShape::HenyeyGreenstein { g, d },
            normalized_on: None,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized_on.is_some()
    }

    fn raw(&self, x: f64, y: f64, alpha: f64, beta: f64) -> f64 {
        match &self.shape {
            KernelShape::Constant(v) => *v,
            KernelShape::HenyeyGreenstein { g, d } => {
                let g = g.eval(x, y);
                hg_value(g, *d, alpha - beta)
            }
        }
    }

    fn raw_d_alpha(&self, x: f64, y: f64, alpha: f64, beta: f64) -> f64 {
        match &self.shape {
            KernelShape::Constant(_) => 0.0,
            KernelShape::HenyeyGreenstein { g, d } => {
                let g = g.eval(x, y);
                hg_d_alpha(g, *d, alpha - beta)
            }
        }
    }

    fn raw_double_integral(&self, x: f64, y: f64, angles: &AngleGrid) -> f64 {
        let nodes = angles.nodes();
        let w = angles.weights();
        let mut total = 0.0;
        for (k, &a) in nodes.iter().enumerate() {
            let mut row = 0.0;
            for (l, &b) in nodes.iter().enumerate() {
                row += w[l] * self.raw(x, y, a, b);
            }
            total += w[k] * row;
        }
        total
    }

    /// Normalization factor at `(x, y)` (1 for unnormalized kernels).
    pub fn scale_at(&self, x: f64, y: f64) -> Result<f64> {
        match &self.normalized_on {
            None => Ok(1.0),
            Some(angles) => {
                let total = self.raw_double_integral(x, y, angles);
                if !(total > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "kernel vanishes at ({x}, {y}); cannot normalize"
                    )));
                }
                Ok(1.0 / total)
            }
        }
    }

    /// `K(x, α, β)`. For normalized kernels this recomputes the scale; use
    /// [`Kernel::matrix_at`] in loops.
    pub fn eval(&self, x: f64, y: f64, alpha: f64, beta: f64) -> Result<f64> {
        Ok(self.scale_at(x, y)? * self.raw(x, y, alpha, beta))
    }

    /// `∂K/∂α`, analytic for every supported kernel shape.
    pub fn d_alpha(&self, x: f64, y: f64, alpha: f64, beta: f64) -> Result<f64> {
        Ok(self.scale_at(x, y)? * self.raw_d_alpha(x, y, alpha, beta))
    }

    /// Row-major `K(x, α_k, β_l)` over `angles`, plus `∂K/∂α` if requested.
    pub fn matrix_at(
        &self,
        x: f64,
        y: f64,
        angles: &AngleGrid,
        with_derivative: bool,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let s = self.scale_at(x, y)?;
        let nodes = angles.nodes();
        let n = nodes.len();
        let mut k = vec![0.0; n * n];
        let mut dk = with_derivative.then(|| vec![0.0; n * n]);
        for (i, &a) in nodes.iter().enumerate() {
            for (l, &b) in nodes.iter().enumerate() {
                k[i * n + l] = s * self.raw(x, y, a, b);
                if let Some(dk) = dk.as_mut() {
                    dk[i * n + l] = s * self.raw_d_alpha(x, y, a, b);
                }
            }
        }
        Ok((k, dk))
    }

    pub fn is_symmetric_shape(&self) -> bool {
        true
    }
}

fn hg_value(g: f64, d: f64, delta: f64) -> f64 {
    (1.0 - g * g) / (1.0 + g * g - 2.0 * g * delta.cos()) / (2.0 * d)
}

fn hg_d_alpha(g: f64, d: f64, delta: f64) -> f64 {
    let den = 1.0 + g * g - 2.0 * g * delta.cos();
    -(1.0 - g * g) * 2.0 * g * delta.sin() / (den * den) / (2.0 * d)
}

/// Rescale `kernel` so its double integral over `angles` is one at every
/// spatial point. Idempotent.
pub fn normalize_kernel(kernel: &Kernel, angles: &AngleGrid) -> Kernel {
    Kernel {
        shape: kernel.shape.clone(),
        normalized_on: Some(angles.clone()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Test1,
    Test2,
    Test3,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "test1" => Ok(Preset::Test1),
            "test2" => Ok(Preset::Test2),
            "test3" => Ok(Preset::Test3),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected test1, test2 or test3)"
            ))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Test1 => "test1",
            Preset::Test2 => "test2",
            Preset::Test3 => "test3",
        })
    }
}

/// Absorption, scattering, kernel and true source on a domain.
///
/// Every field is forced to zero outside the open domain.
#[derive(Debug, Clone, PartialEq)]
pub struct MediaModel {
    pub domain: Domain,
    pub mu_a: PiecewiseField,
    pub mu_s: PiecewiseField,
    pub kernel: Kernel,
    pub source: PiecewiseField,
}

/// Disk `x² + y² < 0.8` used by all presets.
fn central_disk() -> Shape {
    Shape::Disk {
        center: [0.0, 0.0],
        radius: 0.8f64.sqrt(),
    }
}

fn x_shape() -> Shape {
    let bar = |angle| Shape::Bar {
        center: [0.0, 2.0],
        half_length: 0.4,
        half_width: 0.08,
        angle,
    };
    Shape::Union(vec![bar(FRAC_PI_4), bar(-FRAC_PI_4)])
}

fn y_shape() -> Shape {
    // Three arms of length 0.35 radiating from (0, 2): up-left, up-right, down.
    let arm = |dir: f64| {
        let (s, c) = dir.sin_cos();
        Shape::Bar {
            center: [0.175 * c, 2.0 + 0.175 * s],
            half_length: 0.175,
            half_width: 0.07,
            angle: dir,
        }
    };
    Shape::Union(vec![
        // hub so the junction lies strictly inside
        Shape::Disk {
            center: [0.0, 2.0],
            radius: 0.07,
        },
        arm(3.0 * FRAC_PI_4),
        arm(FRAC_PI_4),
        arm(-std::f64::consts::FRAC_PI_2),
    ])
}

impl MediaModel {
    /// Reference configuration for `preset`; `smoothing` is the width of
    /// smoothed edges (two x-spacings by convention).
    pub fn preset(preset: Preset, domain: Domain, smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "smoothing width must be positive, got {smoothing}"
            )));
        }
        let disk = central_disk();
        let mu_a = PiecewiseField::constant(0.0).with(Inclusion::sharp(disk.clone(), 0.1));
        let mu_s_disk = PiecewiseField::constant(0.0).with(Inclusion::sharp(disk.clone(), 0.01));
        let isotropic = Kernel::constant(1.0 / (2.0 * domain.d));
        let model = match preset {
            Preset::Test1 => MediaModel {
                domain,
                mu_a,
                mu_s: PiecewiseField::constant(0.0),
                kernel: isotropic,
                source: PiecewiseField::constant(0.0).with(Inclusion::smooth(
                    Shape::Disk {
                        center: [0.0, 2.0],
                        radius: 0.3,
                    },
                    1.0,
                    smoothing,
                )),
            },
            Preset::Test2 => MediaModel {
                domain,
                mu_a,
                mu_s: mu_s_disk,
                kernel: isotropic,
                source: PiecewiseField::constant(0.0).with(Inclusion::sharp(x_shape(), 1.0)),
            },
            Preset::Test3 => {
                let g = PiecewiseField::constant(0.5).with(Inclusion::smooth(disk.clone(), 0.9, smoothing));
                MediaModel {
                    domain,
                    mu_a: PiecewiseField::constant(0.0)
                        .with(Inclusion::sharp(y_shape(), 0.15))
                        .with(Inclusion::sharp(disk, 0.1)),
                    mu_s: mu_s_disk,
                    kernel: Kernel::henyey_greenstein(g, domain.d),
                    source: PiecewiseField::constant(0.0).with(Inclusion::smooth(y_shape(), 1.0, smoothing)),
                }
            }
        };
        Ok(model)
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        self.domain.contains(x, y)
    }

    pub fn mu_a(&self, x: f64, y: f64) -> f64 {
        if self.inside(x, y) {
            self.mu_a.eval(x, y)
        } else {
            0.0
        }
    }

    pub fn mu_s(&self, x: f64, y: f64) -> f64 {
        if self.inside(x, y) {
            self.mu_s.eval(x, y)
        } else {
            0.0
        }
    }

    /// Attenuation `μ_a + μ_s`.
    pub fn sigma(&self, x: f64, y: f64) -> f64 {
        self.mu_a(x, y) + self.mu_s(x, y)
    }

    pub fn source(&self, x: f64, y: f64) -> f64 {
        if self.inside(x, y) {
            self.source.eval(x, y)
        } else {
            0.0
        }
    }

    pub fn has_scattering(&self) -> bool {
        !self.mu_s.is_zero()
    }

    /// Copy with the kernel normalized on `angles`.
    pub fn with_normalized_kernel(&self, angles: &AngleGrid) -> Self {
        Self {
            kernel: normalize_kernel(&self.kernel, angles),
            ..self.clone()
        }
    }

    /// Copy with the true source replaced.
    pub fn with_source(&self, source: PiecewiseField) -> Self {
        Self { source, ..self.clone() }
    }
}
