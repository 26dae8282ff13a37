//! CSV writers with a fixed numeric format.
//!
//! Every float is written with 17 significant digits in scientific notation
//! (`{:.16e}`), fields are comma separated and lines end with `\n`, so equal
//! results always produce byte-identical files.

use std::io::{self, Write};

use crate::bsde::ValueField;
use crate::chain::measure::MeasureFlow;
use crate::chain::paths::PathEnsemble;
use crate::control::{ControlGrid, FeedbackPolicy, OracleEntry};
use crate::game::{Deviator, SaddleReport};
use crate::girsanov::GirsanovWeight;
use crate::mean_field::FixedPointResult;

/// The canonical float format.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn row(w: &mut dyn Write, fields: &[String]) -> io::Result<()> {
    w.write_all(fields.join(",").as_bytes())?;
    w.write_all(b"\n")
}

fn header(w: &mut dyn Write, names: &[&str]) -> io::Result<()> {
    row(w, &names.iter().map(|s| s.to_string()).collect::<Vec<_>>())
}

/// One row per path start and per jump: `path, event, t, state`.
pub fn write_paths(w: &mut dyn Write, ens: &PathEnsemble) -> io::Result<()> {
    header(w, &["path", "event", "t", "state"])?;
    for (p, path) in ens.paths.iter().enumerate() {
        row(w, &[p.to_string(), "0".into(), fmt_f64(0.0), path.x0.to_string()])?;
        for (e, j) in path.events.iter().enumerate() {
            row(w, &[p.to_string(), (e + 1).to_string(), fmt_f64(j.t), j.to.to_string()])?;
        }
    }
    Ok(())
}

/// `path, log_weight, weight, normalized`.
pub fn write_weights(w: &mut dyn Write, weights: &GirsanovWeight) -> io::Result<()> {
    header(w, &["path", "log_weight", "weight", "normalized"])?;
    let norm = weights.normalize();
    for (p, (l, nl)) in weights.log_weights.iter().zip(&norm.log_weights).enumerate() {
        row(w, &[p.to_string(), fmt_f64(*l), fmt_f64(l.exp()), fmt_f64(nl.exp())])?;
    }
    Ok(())
}

/// `k, t, mu_0, ..., mu_{n-1}`.
pub fn write_flow(w: &mut dyn Write, flow: &MeasureFlow) -> io::Result<()> {
    let mut names = vec!["k".to_string(), "t".to_string()];
    names.extend((0..flow.n()).map(|i| format!("mu_{i}")));
    row(w, &names)?;
    let grid = flow.grid();
    for k in 0..grid.nodes() {
        let mut f = vec![k.to_string(), fmt_f64(grid.t(k))];
        f.extend(flow.at_node(k).mass().iter().map(|m| fmt_f64(*m)));
        row(w, &f)?;
    }
    Ok(())
}

/// `iteration, gap, entropy_gap, ckp_bound` with empty cells where the
/// entropy was not computed.
pub fn write_gaps(w: &mut dyn Write, fp: &FixedPointResult) -> io::Result<()> {
    header(w, &["iteration", "gap", "entropy_gap", "ckp_bound"])?;
    let bounds = fp.ckp_bounds();
    for (k, g) in fp.gaps.iter().enumerate() {
        let h = fp.entropy_gaps.get(k).copied().flatten();
        let b = bounds.get(k).copied().flatten();
        row(
            w,
            &[
                (k + 1).to_string(),
                fmt_f64(*g),
                h.map_or_else(String::new, fmt_f64),
                b.map_or_else(String::new, fmt_f64),
            ],
        )?;
    }
    Ok(())
}

/// `k, t, i, y, z_0, ..., z_{n-1}` with `z_j = y_j - y_i` on the support row
/// of `i` and `0` elsewhere.
pub fn write_value_field(w: &mut dyn Write, vf: &ValueField) -> io::Result<()> {
    let n = vf.n();
    let mut names = vec!["k".to_string(), "t".to_string(), "i".to_string(), "y".to_string()];
    names.extend((0..n).map(|j| format!("z_{j}")));
    row(w, &names)?;
    for k in 0..vf.grid().nodes() {
        for i in 0..n {
            let mut f = vec![k.to_string(), fmt_f64(vf.grid().t(k)), i.to_string(), fmt_f64(vf.y(k, i))];
            f.extend(vf.z_row(k, i).iter().map(|z| fmt_f64(*z)));
            row(w, &f)?;
        }
    }
    Ok(())
}

/// `k, t, i, action_index, action_value`.
pub fn write_policy(
    w: &mut dyn Write,
    policy: &FeedbackPolicy,
    times: &[f64],
    actions: &ControlGrid,
) -> io::Result<()> {
    header(w, &["k", "t", "i", "action_index", "action_value"])?;
    for (k, t) in times.iter().enumerate().take(policy.nodes()) {
        for i in 0..policy.n() {
            let a = policy.at(k, i);
            row(w, &[k.to_string(), fmt_f64(*t), i.to_string(), a.to_string(), fmt_f64(actions.value(a))])?;
        }
    }
    Ok(())
}

/// `policy_id, encoded, cost`; the encoding lists action indices per
/// `(coarse cell, state)`, cell major, joined by `-`.
pub fn write_oracle_table(w: &mut dyn Write, table: &[OracleEntry]) -> io::Result<()> {
    header(w, &["policy_id", "encoded", "cost"])?;
    for e in table {
        let enc: Vec<String> = e.encoded.iter().map(|a| a.to_string()).collect();
        row(w, &[e.id.to_string(), enc.join("-"), fmt_f64(e.cost)])?;
    }
    Ok(())
}

/// `player, kind, node, state, action, policy_id, cost, margin`.
pub fn write_deviations(w: &mut dyn Write, rep: &SaddleReport) -> io::Result<()> {
    header(w, &["player", "kind", "node", "state", "action", "policy_id", "cost", "margin"])?;
    for d in &rep.deviations {
        let player = match d.player {
            Deviator::U => "u",
            Deviator::V => "v",
        };
        let (kind, k, i, a) = match d.node {
            Some((k, i, a)) => ("node", k.to_string(), i.to_string(), a.to_string()),
            None => ("policy", String::new(), String::new(), String::new()),
        };
        let id = d.policy_id.map_or_else(String::new, |p| p.to_string());
        row(w, &[player.into(), kind.into(), k, i, a, id, fmt_f64(d.cost), fmt_f64(d.margin)])?;
    }
    Ok(())
}

/// Simple `key,value` table for scalar summaries.
pub fn write_summary(w: &mut dyn Write, entries: &[(&str, String)]) -> io::Result<()> {
    header(w, &["key", "value"])?;
    for (k, v) in entries {
        row(w, &[k.to_string(), v.clone()])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::measure::{ProbVector, TimeGrid};

    #[test]
    fn float_format_is_fixed() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
        assert_eq!(fmt_f64(0.0), "0.0000000000000000e0");
    }

    #[test]
    fn flow_csv_layout() {
        let flow = MeasureFlow::constant(TimeGrid::uniform(1.0, 1).unwrap(), ProbVector::dirac(2, 1));
        let mut out = Vec::new();
        write_flow(&mut out, &flow).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(
            s,
            "k,t,mu_0,mu_1\n0,0.0000000000000000e0,0.0000000000000000e0,1.0000000000000000e0\n\
             1,1.0000000000000000e0,0.0000000000000000e0,1.0000000000000000e0\n"
        );
    }
}
