//! CSV writers. Every table has a header row; floats carry 17 significant
//! digits so values round-trip exactly.

use std::io::Write;

use crate::bsde::{BsdeSolution, FieldEstimate};
use crate::error::Result;
use crate::forward::PathEnsemble;

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| fmt_float(*v)).collect::<Vec<_>>().join(",")
}

/// `path_id,step,time,x0..,k0..,k,w0..` with `k0..` the reflection process.
pub fn write_ensemble_csv(ensemble: &PathEnsemble, mut w: impl Write) -> Result<()> {
    let d = ensemble.dim();
    let r = ensemble.paths.first().map_or(0, |p| p.noise_dim);
    let mut header = vec!["path_id".to_string(), "step".into(), "time".into()];
    header.extend(indexed("x", d));
    header.extend(indexed("refl", d));
    header.push("k".into());
    header.extend(indexed("w", r));
    writeln!(w, "{}", header.join(","))?;
    for (p, path) in ensemble.paths.iter().enumerate() {
        for i in 0..path.nodes() {
            writeln!(
                w,
                "{p},{i},{},{},{},{},{}",
                fmt_float(ensemble.grid.time(i)),
                join_floats(path.state(i)),
                join_floats(path.reflection(i)),
                fmt_float(path.k[i]),
                join_floats(path.brownian(i)),
            )?;
        }
    }
    Ok(())
}

/// `path_id,step,y0..,dm0..`; `dm` is empty at the terminal node.
pub fn write_bsde_csv(solution: &BsdeSolution, mut w: impl Write) -> Result<()> {
    let k = solution.k_dim;
    let mut header = vec!["path_id".to_string(), "step".into()];
    header.extend(indexed("y", k));
    header.extend(indexed("dm", k));
    writeln!(w, "{}", header.join(","))?;
    let steps = solution.grid.steps();
    let blanks = vec![""; k].join(",");
    for p in 0..solution.paths {
        for i in 0..=steps {
            let dm = if i < steps { join_floats(solution.residual(i, p)) } else { blanks.clone() };
            writeln!(w, "{p},{i},{},{dm}", join_floats(solution.value(i, p)))?;
        }
    }
    Ok(())
}

pub fn field_header(dim: usize, k: usize) -> String {
    let mut header = vec!["t".to_string()];
    header.extend(indexed("x", dim));
    header.push("n".into());
    header.extend(indexed("value", k));
    header.extend(indexed("stderr", k));
    header.extend(["paths".into(), "steps".into(), "seed".into()]);
    header.join(",")
}

/// One row of a field table; `n` is numeric or `reflected`.
pub fn field_row(e: &FieldEstimate) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        fmt_float(e.t),
        join_floats(&e.x),
        e.scheme.label(),
        join_floats(&e.value),
        join_floats(&e.stderr),
        e.paths,
        e.steps,
        e.seed
    )
}

pub fn write_field_csv(estimates: &[FieldEstimate], mut w: impl Write) -> Result<()> {
    let (d, k) = estimates.first().map_or((1, 1), |e| (e.x.len(), e.value.len()));
    writeln!(w, "{}", field_header(d, k))?;
    for e in estimates {
        writeln!(w, "{}", field_row(e))?;
    }
    Ok(())
}
