//! Finite-difference verification of analytic gradients.

use rand::seq::index;
use rayon::prelude::*;

use super::{ModelParams, ParamGroup};
use crate::rng::{rng_for, tag};
use crate::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worst {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub group: ParamGroup,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<Worst>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.groups.iter().all(|g| g.checked > 0) && self.max_rel_error() <= tolerance
    }
}

/// Compares `analytic` with fourth-order central differences
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` on up to
/// `coords_per_group` coordinates sampled from each parameter group.
pub fn grad_check<F>(
    params: &ModelParams,
    analytic: &[f64],
    loss: F,
    coords_per_group: usize,
    epsilon: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<f64> + Sync,
{
    let layout = params.layout();
    let mut groups = Vec::new();
    for (gi, group) in ParamGroup::ALL.into_iter().enumerate() {
        let coords: Vec<usize> = layout.group_ranges(group).into_iter().flatten().collect();
        let chosen: Vec<usize> = if coords.len() <= coords_per_group {
            coords
        } else {
            let mut rng = rng_for(seed, &[tag::GRADCHECK, gi as u64]);
            let mut picked: Vec<usize> =
                index::sample(&mut rng, coords.len(), coords_per_group).into_iter().map(|i| coords[i]).collect();
            picked.sort_unstable();
            picked
        };
        let results = chosen
            .par_iter()
            .map(|&i| {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.values_mut()[i] += delta;
                    loss(&p)
                };
                let h = epsilon;
                let numeric = (-eval(2.0 * h)? + 8.0 * eval(h)? - 8.0 * eval(-h)? + eval(-2.0 * h)?) / (12.0 * h);
                Ok((i, analytic[i], numeric))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut report = GroupReport { group, checked: results.len(), max_rel_error: 0.0, worst: None };
        for (i, a, n) in results {
            let e = relative_error(a, n);
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                let t = layout.tensors().iter().find(|t| t.range().contains(&i)).expect("coordinate in layout");
                report.worst = Some(Worst { tensor: t.name.clone(), index: i - t.offset, analytic: a, numeric: n });
            }
        }
        groups.push(report);
    }
    Ok(GradCheckReport { groups })
}
