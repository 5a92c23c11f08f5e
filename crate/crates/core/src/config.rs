//! Run configuration: flat `section.key = value` text, `#` comments.
//!
//! ```text
//! domain.a = 1
//! grid.mx = 50
//! media.preset = test1
//! qrm.epsilon1 = 0.1
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::forward::{ForwardOptions, NoiseModel};
use crate::grid::{AngleGrid, Domain, Grid2D};
use crate::media::{Inclusion, Kernel, MediaModel, PiecewiseField, Preset, Shape};
use crate::qrm::SolverKind;
use crate::reconstruction::{Neighborhood, PostOptions};

/// Media given explicitly instead of by preset: constant coefficients and
/// a smoothed disk source.
#[derive(Debug, Clone, PartialEq)]
pub struct CustomMedia {
    pub mu_a: f64,
    pub mu_s: f64,
    /// Henyey–Greenstein factor; `None` selects the isotropic `1/(2d)` kernel.
    pub g: Option<f64>,
    /// `[cx, cy, radius]`.
    pub source_disk: [f64; 3],
    pub source_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MediaSpec {
    Preset(Preset),
    Custom(CustomMedia),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Csv,
    Pgm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub r: f64,
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub mx: usize,
    pub my: usize,
    pub m_alpha: usize,
    pub n: usize,
    pub q: usize,
    pub media: MediaSpec,
    /// Edge smoothing width; `None` means two x-spacings.
    pub smoothing: Option<f64>,
    pub normalize_kernel: bool,
    pub forward_tol: f64,
    pub forward_max_iter: usize,
    pub delta: f64,
    pub seed: u64,
    pub noise_model: NoiseModel,
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub solver: SolverKind,
    pub qrm_tol: f64,
    /// `None` means `20 sqrt(dim)`.
    pub qrm_max_iter: Option<usize>,
    pub post: PostOptions,
    pub out_dir: PathBuf,
    pub formats: Vec<GridFormat>,
    pub dump_operator: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            r: 1.0,
            a: 1.0,
            b: 3.0,
            d: 5.0,
            mx: 100,
            my: 100,
            m_alpha: 50,
            n: 12,
            q: 400,
            media: MediaSpec::Preset(Preset::Test1),
            smoothing: None,
            normalize_kernel: false,
            forward_tol: 1e-10,
            forward_max_iter: 100,
            delta: 0.0,
            seed: 1,
            noise_model: NoiseModel::default(),
            epsilon1: 0.1,
            epsilon2: 0.01,
            solver: SolverKind::Cholesky,
            qrm_tol: 1e-10,
            qrm_max_iter: None,
            post: PostOptions::default(),
            out_dir: PathBuf::from("out"),
            formats: vec![GridFormat::Csv, GridFormat::Pgm],
            dump_operator: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{value}'"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|s| parse(key, s.trim())).collect()
}

const CUSTOM_DEFAULT: CustomMedia = CustomMedia {
    mu_a: 0.0,
    mu_s: 0.0,
    g: None,
    source_disk: [0.0, 2.0, 0.3],
    source_value: 1.0,
};

impl RunConfig {
    /// Parse flat config text on top of the defaults and validate.
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key}", ln + 1)));
            }
        }
        let mut cfg = Self::default();
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn custom(&mut self) -> &mut CustomMedia {
        if !matches!(self.media, MediaSpec::Custom(_)) {
            self.media = MediaSpec::Custom(CUSTOM_DEFAULT);
        }
        match &mut self.media {
            MediaSpec::Custom(c) => c,
            MediaSpec::Preset(_) => unreachable!(),
        }
    }

    /// Apply one `key = value` override (no validation).
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "domain.r" => self.r = parse(key, v)?,
            "domain.a" => self.a = parse(key, v)?,
            "domain.b" => self.b = parse(key, v)?,
            "domain.d" => self.d = parse(key, v)?,
            "grid.mx" => self.mx = parse(key, v)?,
            "grid.my" => self.my = parse(key, v)?,
            "grid.malpha" => self.m_alpha = parse(key, v)?,
            "basis.n" => self.n = parse(key, v)?,
            "basis.q" => self.q = parse(key, v)?,
            "media.preset" => match v.to_ascii_lowercase().as_str() {
                "custom" => {
                    self.custom();
                }
                _ => self.media = MediaSpec::Preset(v.parse()?),
            },
            "media.smoothing" => self.smoothing = Some(parse(key, v)?),
            "media.normalize_kernel" => self.normalize_kernel = parse_bool(key, v)?,
            "media.custom.mu_a" => self.custom().mu_a = parse(key, v)?,
            "media.custom.mu_s" => self.custom().mu_s = parse(key, v)?,
            "media.custom.g" => self.custom().g = Some(parse(key, v)?),
            "media.custom.source_value" => self.custom().source_value = parse(key, v)?,
            "media.custom.source_disk" => {
                let l = parse_list(key, v)?;
                if l.len() != 3 {
                    return Err(Error::Config(format!("{key}: expected cx, cy, radius")));
                }
                self.custom().source_disk = [l[0], l[1], l[2]];
            }
            "forward.tol" => self.forward_tol = parse(key, v)?,
            "forward.max_iter" => self.forward_max_iter = parse(key, v)?,
            "noise.delta" => self.delta = parse(key, v)?,
            "noise.seed" => self.seed = parse(key, v)?,
            "noise.model" => self.noise_model = v.parse()?,
            "qrm.epsilon1" => self.epsilon1 = parse(key, v)?,
            "qrm.epsilon2" => self.epsilon2 = parse(key, v)?,
            "qrm.solver" => self.solver = v.parse()?,
            "qrm.tol" => self.qrm_tol = parse(key, v)?,
            "qrm.max_iter" => self.qrm_max_iter = Some(parse(key, v)?),
            "qrm.dump_operator" => self.dump_operator = parse_bool(key, v)?,
            "post.threshold_fraction" => self.post.threshold_fraction = parse(key, v)?,
            "post.kernel" => self.post.neighborhood = v.parse::<Neighborhood>()?,
            "output.directory" => self.out_dir = PathBuf::from(v),
            "output.formats" => {
                self.formats = v
                    .split(',')
                    .map(|s| match s.trim().to_ascii_lowercase().as_str() {
                        "csv" => Ok(GridFormat::Csv),
                        "pgm" => Ok(GridFormat::Pgm),
                        other => Err(Error::Config(format!("{key}: unknown format '{other}'"))),
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Check every numeric field against the preconditions of the stages.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        Domain::new(self.r, self.a, self.b, self.d).map_err(|e| Error::Config(e.to_string()))?;
        if self.mx < 2 || self.my < 2 {
            return bad(format!(
                "grid.mx and grid.my must be >= 2, got {} and {}",
                self.mx, self.my
            ));
        }
        if self.m_alpha < 2 {
            return bad(format!("grid.malpha must be >= 2, got {}", self.m_alpha));
        }
        if self.n < 1 {
            return bad("basis.n must be >= 1".into());
        }
        if self.q < crate::basis::MIN_QUADRATURE {
            return bad(format!(
                "basis.q must be >= {}, got {}",
                crate::basis::MIN_QUADRATURE,
                self.q
            ));
        }
        if let Some(s) = self.smoothing {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("media.smoothing must be positive, got {s}"));
            }
        }
        if let MediaSpec::Custom(c) = &self.media {
            if !(c.mu_a >= 0.0 && c.mu_s >= 0.0 && c.mu_a.is_finite() && c.mu_s.is_finite()) {
                return bad(format!(
                    "custom media needs mu_a, mu_s >= 0, got {}, {}",
                    c.mu_a, c.mu_s
                ));
            }
            if let Some(g) = c.g {
                if !(0.0..1.0).contains(&g) {
                    return bad(format!("media.custom.g must lie in [0, 1), got {g}"));
                }
            }
            if !(c.source_disk[2] > 0.0) || !c.source_value.is_finite() {
                return bad("custom source needs a positive radius and finite value".into());
            }
        }
        if !(self.forward_tol > 0.0) || self.forward_max_iter == 0 {
            return bad("forward.tol must be positive and forward.max_iter >= 1".into());
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return bad(format!("noise.delta must be >= 0, got {}", self.delta));
        }
        if !(self.epsilon1 > 0.0 && self.epsilon1.is_finite()) {
            return bad(format!("qrm.epsilon1 must be positive, got {}", self.epsilon1));
        }
        if !(self.epsilon2 >= 0.0 && self.epsilon2.is_finite()) {
            return bad(format!("qrm.epsilon2 must be >= 0, got {}", self.epsilon2));
        }
        if !(self.qrm_tol > 0.0) || self.qrm_max_iter == Some(0) {
            return bad("qrm.tol must be positive and qrm.max_iter >= 1".into());
        }
        if !(0.0..1.0).contains(&self.post.threshold_fraction) {
            return bad(format!(
                "post.threshold_fraction must lie in [0, 1), got {}",
                self.post.threshold_fraction
            ));
        }
        Ok(())
    }

    /// Non-fatal remarks, such as a grid step outside the range covered
    /// by the convergence theory.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let hx = 2.0 * self.r / self.mx as f64;
        if hx >= 1.0 {
            w.push(format!("grid step h_x = {hx} is not below 1"));
        }
        w
    }

    pub fn domain(&self) -> Result<Domain> {
        Domain::new(self.r, self.a, self.b, self.d)
    }

    pub fn grid(&self) -> Result<Grid2D> {
        Grid2D::new(self.domain()?, self.mx, self.my)
    }

    pub fn angles(&self) -> Result<AngleGrid> {
        AngleGrid::new(self.d, self.m_alpha)
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            tol: self.forward_tol,
            max_iter: self.forward_max_iter,
        }
    }

    pub fn media_model(&self) -> Result<MediaModel> {
        let domain = self.domain()?;
        let smoothing = self.smoothing.unwrap_or(2.0 * 2.0 * self.r / self.mx as f64);
        let model = match &self.media {
            MediaSpec::Preset(p) => MediaModel::preset(*p, domain, smoothing)?,
            MediaSpec::Custom(c) => MediaModel {
                domain,
                mu_a: PiecewiseField::constant(c.mu_a),
                mu_s: PiecewiseField::constant(c.mu_s),
                kernel: match c.g {
                    Some(g) => Kernel::henyey_greenstein(PiecewiseField::constant(g), self.d),
                    None => Kernel::constant(1.0 / (2.0 * self.d)),
                },
                source: PiecewiseField::constant(0.0).with(Inclusion::smooth(
                    Shape::Disk {
                        center: [c.source_disk[0], c.source_disk[1]],
                        radius: c.source_disk[2],
                    },
                    c.source_value,
                    smoothing,
                )),
            },
        };
        Ok(if self.normalize_kernel {
            model.with_normalized_kernel(&self.angles()?)
        } else {
            model
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("domain.r", self.r.to_string());
        kv("domain.a", self.a.to_string());
        kv("domain.b", self.b.to_string());
        kv("domain.d", self.d.to_string());
        kv("grid.mx", self.mx.to_string());
        kv("grid.my", self.my.to_string());
        kv("grid.malpha", self.m_alpha.to_string());
        kv("basis.n", self.n.to_string());
        kv("basis.q", self.q.to_string());
        match &self.media {
            MediaSpec::Preset(p) => kv("media.preset", p.to_string()),
            MediaSpec::Custom(c) => {
                kv("media.preset", "custom".into());
                kv("media.custom.mu_a", c.mu_a.to_string());
                kv("media.custom.mu_s", c.mu_s.to_string());
                if let Some(g) = c.g {
                    kv("media.custom.g", g.to_string());
                }
                kv(
                    "media.custom.source_disk",
                    format!("{},{},{}", c.source_disk[0], c.source_disk[1], c.source_disk[2]),
                );
                kv("media.custom.source_value", c.source_value.to_string());
            }
        }
        if let Some(sm) = self.smoothing {
            kv("media.smoothing", sm.to_string());
        }
        kv("media.normalize_kernel", self.normalize_kernel.to_string());
        kv("forward.tol", self.forward_tol.to_string());
        kv("forward.max_iter", self.forward_max_iter.to_string());
        kv("noise.delta", self.delta.to_string());
        kv("noise.seed", self.seed.to_string());
        kv("noise.model", self.noise_model.to_string());
        kv("qrm.epsilon1", self.epsilon1.to_string());
        kv("qrm.epsilon2", self.epsilon2.to_string());
        kv("qrm.solver", self.solver.to_string());
        kv("qrm.tol", self.qrm_tol.to_string());
        if let Some(m) = self.qrm_max_iter {
            kv("qrm.max_iter", m.to_string());
        }
        kv("qrm.dump_operator", self.dump_operator.to_string());
        kv("post.threshold_fraction", self.post.threshold_fraction.to_string());
        kv(
            "post.kernel",
            match self.post.neighborhood {
                Neighborhood::Box3 => "box3".into(),
                Neighborhood::Cross => "cross".into(),
            },
        );
        kv("output.directory", self.out_dir.display().to_string());
        let f: Vec<&str> = self
            .formats
            .iter()
            .map(|f| match f {
                GridFormat::Csv => "csv",
                GridFormat::Pgm => "pgm",
            })
            .collect();
        kv("output.formats", f.join(","));
        s
    }
}
