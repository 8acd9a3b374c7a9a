//! Resource sweeps: one CSV row per point of a parameter grid.

use anyhow::Result;
use rayon::prelude::*;
use windmill::arch::{derive_counts, perimeter_layout, ArchParams, ExecMode, ResourceReport, SharedRegMode, Topology};

use crate::commands::InputError;

const KEYS: &[&str] = &[
    "rows",
    "cols",
    "topology",
    "exec_mode",
    "context_depth_mcmd",
    "shared_reg_mode",
    "shared_reg_count",
    "sm_banks",
    "bank_depth",
    "bank_width",
    "rpu_count",
];

fn bad(msg: String) -> anyhow::Error {
    InputError(msg).into()
}

/// Parses `key=v1,v2` or `key=lo..=hi` (also `lo..hi`).
fn parse_axis(axis: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = axis.split_once('=').ok_or_else(|| bad(format!("sweep `{axis}`: expected key=values")))?;
    let key = key.trim();
    if !KEYS.contains(&key) {
        return Err(bad(format!("sweep key `{key}` is not one of {}", KEYS.join(", "))));
    }
    let values = values.trim();
    let range = values
        .split_once("..=")
        .map(|(a, b)| (a, b, true))
        .or_else(|| values.split_once("..").map(|(a, b)| (a, b, false)));
    let list = match range {
        Some((lo, hi, inclusive)) => {
            let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(format!("sweep `{axis}`: bad bound `{s}`")));
            let (lo, hi) = (num(lo)?, num(hi)?);
            let hi = if inclusive { hi + 1 } else { hi };
            (lo..hi).map(|v| v.to_string()).collect()
        }
        None => values.split(',').map(|v| v.trim().to_string()).collect::<Vec<_>>(),
    };
    if list.is_empty() || list.iter().any(String::is_empty) {
        return Err(bad(format!("sweep `{axis}`: empty value list")));
    }
    Ok((key.to_string(), list))
}

fn apply(params: &mut ArchParams, key: &str, value: &str) -> Result<()> {
    let num = || value.parse::<usize>().map_err(|_| bad(format!("{key}: `{value}` is not a number")));
    match key {
        "rows" | "cols" => {
            let with_cpe = params.cpe().is_some();
            if key == "rows" {
                params.rows = num()?;
            } else {
                params.cols = num()?;
            }
            params.pe_types = perimeter_layout(params.rows, params.cols, with_cpe);
        }
        "topology" => {
            params.topology =
                Topology::from_keyword(value).ok_or_else(|| bad(format!("unknown topology `{value}`")))?;
        }
        "exec_mode" => {
            params.exec_mode = match value {
                "scmd" => ExecMode::Scmd,
                "mcmd" => ExecMode::Mcmd,
                _ => return Err(bad(format!("unknown exec_mode `{value}`"))),
            }
        }
        "shared_reg_mode" => {
            params.shared_reg_mode =
                [SharedRegMode::Line, SharedRegMode::Row, SharedRegMode::Quadrant, SharedRegMode::Global]
                    .into_iter()
                    .find(|m| m.keyword() == value)
                    .ok_or_else(|| bad(format!("unknown shared_reg_mode `{value}`")))?;
        }
        "context_depth_mcmd" => params.context_depth_mcmd = num()?,
        "shared_reg_count" => params.shared_reg_count = num()?,
        "sm_banks" => params.sm_banks = num()?,
        "bank_depth" => params.bank_depth = num()?,
        "bank_width" => params.bank_width = num()? as u32,
        "rpu_count" => params.rpu_count = num()?,
        _ => unreachable!("keys are checked while parsing"),
    }
    Ok(())
}

/// Cartesian product of the axes, first axis slowest.
fn grid(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.into_iter()
            .flat_map(|point| {
                values.iter().map(move |v| {
                    let mut p = point.clone();
                    p.push((key.clone(), v.clone()));
                    p
                })
            })
            .collect()
    })
}

/// Evaluates every configuration of the grid and returns the CSV, rows in
/// grid order regardless of `jobs`.
pub fn run(base: &ArchParams, specs: &[String], jobs: usize) -> Result<String> {
    let axes = specs.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>>>()?;
    let points = grid(&axes);
    let configs = points
        .iter()
        .map(|point| {
            let mut p = base.clone();
            for (k, v) in point {
                apply(&mut p, k, v)?;
            }
            p.validate().map_err(|e| bad(format!("sweep point {point:?}: {e}")))?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let rows: Vec<String> = pool.install(|| configs.par_iter().map(|p| derive_counts(p).csv_row()).collect());
    let mut csv = String::from(ResourceReport::CSV_HEADER);
    csv.push('\n');
    for r in rows {
        csv.push_str(&r);
        csv.push('\n');
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_and_grid_order() {
        assert_eq!(parse_axis("rows=2..=4").unwrap().1, ["2", "3", "4"]);
        assert_eq!(parse_axis("rows=2..4").unwrap().1, ["2", "3"]);
        assert_eq!(parse_axis("topology=mesh2d,torus").unwrap().1, ["mesh2d", "torus"]);
        assert!(parse_axis("colour=red").is_err());
        assert!(parse_axis("rows").is_err());
        let g = grid(&[parse_axis("rows=1,2").unwrap(), parse_axis("cols=3,4").unwrap()]);
        let flat: Vec<String> = g.iter().map(|p| format!("{}{}", p[0].1, p[1].1)).collect();
        assert_eq!(flat, ["13", "14", "23", "24"]);
    }

    #[test]
    fn parallel_sweep_matches_sequential() {
        let base = ArchParams::standard();
        let specs = ["rows=3..=8".to_string(), "exec_mode=scmd,mcmd".to_string()];
        let one = run(&base, &specs, 1).unwrap();
        assert_eq!(one.lines().count(), 1 + 12);
        assert_eq!(run(&base, &specs, 4).unwrap(), one);
    }

    #[test]
    fn invalid_points_are_input_errors() {
        let e = run(&ArchParams::standard(), &["rows=0".to_string()], 1).unwrap_err();
        assert!(e.is::<InputError>());
    }
}
