//! Per-check margin records and their aggregation.

use serde::Serialize;

/// One sampled margin value together with its space-time location
/// (`x₁ … xₙ, t`; the time coordinate is omitted for purely spatial checks).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginPoint {
    pub location: Vec<f64>,
    pub margin: f64,
}

/// Result of one verification check.
///
/// `pass ⇔ min_margin ≥ −tolerance`. Reports may nest: a composite report
/// takes the minimum over its components and passes only if all of them do.
#[derive(Debug, Clone, Serialize)]
pub struct MarginReport {
    pub name: String,
    pub sample_count: usize,
    pub min_margin: f64,
    pub argmin: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub empirical_constant: Option<f64>,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<MarginReport>,
    #[serde(skip)]
    pub points: Vec<MarginPoint>,
}

impl MarginReport {
    /// Builds a report from sampled margins; the first minimum wins ties so
    /// the argmin is independent of evaluation order.
    pub fn from_points(name: impl Into<String>, points: Vec<MarginPoint>, tolerance: f64) -> Self {
        let mut min_margin = f64::INFINITY;
        let mut argmin = Vec::new();
        for p in &points {
            if p.margin < min_margin || (p.margin.is_nan() && !min_margin.is_nan()) {
                min_margin = p.margin;
                argmin = p.location.clone();
            }
        }
        if points.is_empty() {
            min_margin = 0.0;
        }
        MarginReport {
            name: name.into(),
            sample_count: points.len(),
            min_margin,
            argmin,
            empirical_constant: None,
            tolerance,
            pass: min_margin >= -tolerance,
            components: Vec::new(),
            points,
        }
    }

    /// A report with a single scalar margin and no location.
    pub fn scalar(name: impl Into<String>, margin: f64, tolerance: f64) -> Self {
        Self::from_points(
            name,
            vec![MarginPoint {
                location: Vec::new(),
                margin,
            }],
            tolerance,
        )
    }

    pub fn combine(name: impl Into<String>, components: Vec<MarginReport>) -> Self {
        let mut min_margin = f64::INFINITY;
        let mut argmin = Vec::new();
        let mut tolerance = 0.0;
        for c in &components {
            if c.min_margin < min_margin || c.min_margin.is_nan() {
                min_margin = c.min_margin;
                argmin = c.argmin.clone();
                tolerance = c.tolerance;
            }
        }
        if components.is_empty() {
            min_margin = 0.0;
        }
        let sample_count = components.iter().map(|c| c.sample_count).max().unwrap_or(0);
        let pass = components.iter().all(|c| c.pass);
        MarginReport {
            name: name.into(),
            sample_count,
            min_margin,
            argmin,
            empirical_constant: None,
            tolerance,
            pass,
            components,
            points: Vec::new(),
        }
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.empirical_constant = Some(c);
        self
    }

    /// Depth-first search for a component by name (including `self`).
    pub fn find(&self, name: &str) -> Option<&MarginReport> {
        if self.name == name {
            return Some(self);
        }
        self.components.iter().find_map(|c| c.find(name))
    }
}

/// Refinement-stability check of an empirical supremum: the margin is
/// `ln 2 − |ln(fine/coarse)|`, so it passes iff the two estimates agree within
/// a factor of two. Two zero estimates count as stable.
pub fn stability_report(
    name: impl Into<String>,
    coarse: f64,
    fine: f64,
    coarse_count: usize,
    fine_count: usize,
) -> MarginReport {
    let margin = stability_margin(coarse, fine);
    let mut r = MarginReport::scalar(name, margin, 0.0);
    r.sample_count = fine_count.max(coarse_count);
    r.empirical_constant = Some(fine);
    r
}

/// Empirical supremum of nonnegative values with a refinement-stability
/// check: the estimate from every fourth value against the estimate from
/// all of them (a 4× refinement of the cloud).
pub fn empirical_sup_report(name: impl Into<String>, values: &[f64]) -> MarginReport {
    let fine = values.iter().cloned().fold(0.0, f64::max);
    let coarse = values.iter().step_by(4).cloned().fold(0.0, f64::max);
    stability_report(name, coarse, fine, values.len().div_ceil(4), values.len())
}

pub fn stability_margin(coarse: f64, fine: f64) -> f64 {
    if !coarse.is_finite() || !fine.is_finite() {
        return f64::NEG_INFINITY;
    }
    if coarse == 0.0 && fine == 0.0 {
        return std::f64::consts::LN_2;
    }
    if coarse <= 0.0 || fine <= 0.0 {
        return f64::NEG_INFINITY;
    }
    std::f64::consts::LN_2 - (fine / coarse).ln().abs()
}
