//! Finite-difference oracle for the local gradients of one trial.
//!
//! Every objective is evaluated with the extractions of the unperturbed
//! trial held fixed, so perturbing a group only moves the terms that group
//! appears in directly.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::graph::{ExnetGraph, VertexId};
use crate::neural::{concat, GradSet, GroupId, NetworkBundle, Role};
use crate::tasks::LossFn;
use crate::xprop::{ComplementaryCache, Mode, PrimaryCache, Result};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

#[allow(clippy::too_many_arguments)]
fn vertex_term(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    primary: &PrimaryCache,
    comp: &ComplementaryCache,
    loss: &dyn LossFn,
    mode: Mode,
    v: VertexId,
    role: Role,
) -> Result<f64> {
    let t = nets.net(Role::Trainer);
    let theta_t = nets.trainer_params(v);
    match role {
        Role::Trainer => {
            let y = t.forward2(theta_t, primary.get(v), comp.vertex(v)?)?;
            Ok(loss.value(&y)?)
        }
        Role::Primary => {
            let (l, r) = g.children(v).expect("internal");
            let a = nets.net(Role::Primary).forward2(nets.primary_params(v), primary.get(l), primary.get(r))?;
            let y = t.forward2(theta_t, &a, comp.vertex(v)?)?;
            Ok(loss.value(&y)?)
        }
        Role::Complementary => {
            let gnet = nets.net(Role::Complementary);
            let arc_out = |a| -> Result<Vec<f64>> {
                let z = g.arc(a).src;
                let input = concat(comp.vertex(z)?, primary.get(g.arc_sibling(a)));
                Ok(gnet.forward(nets.complementary_params(a), &input)?)
            };
            match mode {
                Mode::Sm => {
                    let mut total = 0.0;
                    for &a in g.parent_arcs(v) {
                        let y = t.forward2(theta_t, primary.get(v), &arc_out(a)?)?;
                        total += loss.value(&y)?;
                    }
                    Ok(total)
                }
                Mode::Dm => {
                    let parents = g.parent_arcs(v);
                    if parents.is_empty() {
                        return Ok(0.0);
                    }
                    let mut beta = vec![0.0; nets.dims().complementary];
                    for &a in parents {
                        for (x, y) in beta.iter_mut().zip(arc_out(a)?) {
                            *x += y;
                        }
                    }
                    let y = t.forward2(theta_t, primary.get(v), &beta)?;
                    Ok(loss.value(&y)?)
                }
            }
        }
    }
}

/// Internal vertices whose local terms depend on group `gid`.
fn members(g: &ExnetGraph, nets: &NetworkBundle, gid: GroupId) -> Vec<VertexId> {
    let role = nets.group(gid).role;
    let mut out: Vec<VertexId> = g
        .internal_vertices()
        .filter(|&v| match role {
            Role::Primary => nets.primary_group(v) == Some(gid),
            Role::Trainer => nets.trainer_group(v) == Some(gid),
            Role::Complementary => g.parent_arcs(v).iter().any(|&a| nets.complementary_group(a) == Some(gid)),
        })
        .collect();
    out.dedup();
    out
}

/// Central-difference gradient of every parameter of every group.
pub fn numeric_gradients(
    g: &ExnetGraph,
    nets: &NetworkBundle,
    primary: &PrimaryCache,
    comp: &ComplementaryCache,
    loss: &dyn LossFn,
    mode: Mode,
    step: f64,
) -> Result<GradSet> {
    let mut work = nets.clone();
    let mut out = GradSet::new();
    for gid in nets.group_ids() {
        let role = nets.group(gid).role;
        let verts = members(g, nets, gid);
        let n = nets.group(gid).params.len();
        let mut grad = vec![0.0; n];
        let objective = |b: &NetworkBundle| -> Result<f64> {
            let mut s = 0.0;
            for &v in &verts {
                s += vertex_term(g, b, primary, comp, loss, mode, v, role)?;
            }
            Ok(s)
        };
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = work.params_mut(gid)[i];
            work.params_mut(gid)[i] = orig + step;
            let plus = objective(&work)?;
            work.params_mut(gid)[i] = orig - step;
            let minus = objective(&work)?;
            work.params_mut(gid)[i] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        out.accumulate(gid, &grad);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Offence {
    pub group: String,
    pub role: Role,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AuditReport {
    pub max_rel_error: BTreeMap<String, f64>,
    pub worst: Option<Offence>,
    pub compared: usize,
}

impl AuditReport {
    pub fn max_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |w| w.rel_error)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error() <= tolerance
    }

    pub fn merge(&mut self, other: &AuditReport) {
        for (k, v) in &other.max_rel_error {
            let e = self.max_rel_error.entry(k.clone()).or_insert(0.0);
            *e = e.max(*v);
        }
        if let Some(w) = &other.worst {
            if w.rel_error > self.max_error() || self.worst.is_none() {
                self.worst = Some(w.clone());
            }
        }
        self.compared += other.compared;
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (role, e) in &self.max_rel_error {
            writeln!(f, "{role:>14}: max rel error {e:.3e}")?;
        }
        match &self.worst {
            Some(w) => write!(
                f,
                "worst: {}[{}] analytic {:.6e} numeric {:.6e} ({:.3e}) over {} parameters",
                w.group, w.index, w.analytic, w.numeric, w.rel_error, self.compared
            ),
            None => write!(f, "no parameters compared"),
        }
    }
}

/// Compares analytic against numeric gradients group by group. A group
/// missing from `analytic` counts as zero.
pub fn compare(nets: &NetworkBundle, analytic: &GradSet, numeric: &GradSet) -> AuditReport {
    let mut report = AuditReport::default();
    for role in Role::ALL {
        report.max_rel_error.insert(role.name().to_string(), 0.0);
    }
    for (gid, num) in numeric.iter() {
        let group = nets.group(gid);
        let ana = analytic.get(gid);
        for (i, &n) in num.iter().enumerate() {
            let a = ana.map_or(0.0, |x| x[i]);
            let e = relative_error(a, n);
            let slot = report.max_rel_error.get_mut(group.role.name()).expect("all roles present");
            *slot = slot.max(e);
            if report.worst.as_ref().is_none_or(|w| e > w.rel_error) {
                report.worst = Some(Offence {
                    group: group.name.clone(),
                    role: group.role,
                    index: i,
                    analytic: a,
                    numeric: n,
                    rel_error: e,
                });
            }
            report.compared += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-4).abs() < 1e-15);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
