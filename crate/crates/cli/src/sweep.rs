//! Grid evaluation: `--sweep alpha=0:1:0.1 --sweep beta=0.5:1:0.25`.

use std::fmt::Write as _;

use crate::commands::{load_dataset, out_dir, run_eval};
use crate::config::RunConfig;
use crate::exit::Failure;
use crate::session::Session;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Alpha,
    Beta,
    Entities,
    Split,
    Depth,
    BeamWidth,
}

impl Param {
    fn parse(name: &str) -> Result<Self, Failure> {
        Ok(match name.trim().replace('_', "-").as_str() {
            "alpha" => Param::Alpha,
            "beta" => Param::Beta,
            "entities" | "m" => Param::Entities,
            "split" | "s" => Param::Split,
            "depth" | "l" => Param::Depth,
            "beam-width" | "k" => Param::BeamWidth,
            other => return Err(Failure::usage(format!("cannot sweep `{other}`"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Param::Alpha => "alpha",
            Param::Beta => "beta",
            Param::Entities => "entities",
            Param::Split => "split",
            Param::Depth => "depth",
            Param::BeamWidth => "beam-width",
        }
    }

    fn is_integer(self) -> bool {
        !matches!(self, Param::Alpha | Param::Beta)
    }

    fn apply(self, cfg: &mut RunConfig, v: f64) {
        match self {
            Param::Alpha => cfg.alpha = v,
            Param::Beta => cfg.beta = v,
            Param::Entities => cfg.m = v as usize,
            Param::Split => cfg.s = v as usize,
            Param::Depth => cfg.l = v as usize,
            Param::BeamWidth => cfg.beam_width = v as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub param: Param,
    pub values: Vec<f64>,
}

/// Parses `NAME=START:STOP:STEP`; both ends are included.
pub fn parse_axis(spec: &str) -> Result<Axis, Failure> {
    let bad = || Failure::usage(format!("bad sweep `{spec}`; expected NAME=START:STOP:STEP"));
    let (name, range) = spec.split_once('=').ok_or_else(bad)?;
    let param = Param::parse(name)?;
    let parts: Vec<f64> = range
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    let [start, stop, step] = parts[..] else { return Err(bad()) };
    if !(step > 0.0) || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    if n > 10_000 {
        return Err(Failure::usage(format!("sweep `{spec}` has too many cells")));
    }
    // Round away the drift of repeated float steps (0.1 * 3 = 0.30000000000000004).
    let values: Vec<f64> = (0..=n)
        .map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9)
        .collect();
    if param.is_integer() && values.iter().any(|v| v.fract() != 0.0 || *v < 1.0) {
        return Err(Failure::usage(format!("`{}` takes positive integers", param.name())));
    }
    Ok(Axis { param, values })
}

/// Every combination of axis values, first axis varying slowest.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(Param, f64)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |&v| {
                    let mut c = prefix.clone();
                    c.push((axis.param, v));
                    c
                })
            })
            .collect();
    }
    out
}

fn cell_label(cell: &[(Param, f64)]) -> String {
    cell.iter()
        .map(|(p, v)| format!("{}={v}", p.name()))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn run(cfg: &RunConfig, specs: &[String], scorer: &str) -> Result<(), Failure> {
    let kind = scorer.parse().map_err(|e: cocotree::Error| Failure::usage(e.to_string()))?;
    let axes = specs.iter().map(|s| parse_axis(s)).collect::<Result<Vec<_>, _>>()?;
    if axes.iter().enumerate().any(|(i, a)| axes[..i].iter().any(|b| b.param == a.param)) {
        return Err(Failure::usage("each parameter may be swept once"));
    }
    let grid = cells(&axes);
    let mut configs = Vec::with_capacity(grid.len());
    for cell in &grid {
        let mut c = cfg.clone();
        for &(p, v) in cell {
            p.apply(&mut c, v);
        }
        c.validate()?;
        configs.push(c);
    }
    let (manifest, dataset) = load_dataset(cfg)?;
    let session = Session::open(cfg)?;
    let root = out_dir(cfg);
    let mut summary = format!("{:<36} {:>8} {:>8} {:>8}\n", "cell", "Text", "Image", "Group");
    for (cell, c) in grid.iter().zip(&configs) {
        let label = cell_label(cell);
        let dir = root.join(label.replace(',', "_"));
        let report = run_eval(c, &session, &manifest, &dataset, kind, &dir, false)?;
        let s = &report.overall;
        let opt = |x: Option<f64>| x.map_or("-".to_owned(), |v| format!("{v:.2}"));
        let _ = writeln!(summary, "{label:<36} {:>8.2} {:>8} {:>8}", s.text, opt(s.image), opt(s.group));
    }
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("sweep.txt"), &summary)?;
    print!("{summary}");
    session.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inclusive_rounded_grid() {
        let a = parse_axis("alpha=0:1:0.1").unwrap();
        assert_eq!(a.values.len(), 11);
        assert_eq!(a.values[3], 0.3);
        assert_eq!(a.values[10], 1.0);
        assert_eq!(parse_axis("beam-width=1:5:2").unwrap().values, [1.0, 3.0, 5.0]);
    }

    #[test]
    fn rejects_bad_specs() {
        for s in ["alpha", "alpha=0:1", "alpha=1:0:0.1", "alpha=0:1:0", "gamma=0:1:1", "depth=0.5:1:0.5"] {
            assert_eq!(parse_axis(s).unwrap_err().code, 1, "{s}");
        }
    }

    #[test]
    fn cartesian_order() {
        let axes = [parse_axis("alpha=0:1:1").unwrap(), parse_axis("k=1:3:1").unwrap()];
        let g = cells(&axes);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], [(Param::Alpha, 0.0), (Param::BeamWidth, 1.0)]);
        assert_eq!(g[3], [(Param::Alpha, 1.0), (Param::BeamWidth, 1.0)]);
        assert_eq!(cell_label(&g[5]), "alpha=1,beam-width=3");
    }

    proptest::proptest! {
        #[test]
        fn grid_stays_in_range(start in 0u32..100, len in 0u32..100, step in 1u32..50) {
            let (a, b, d) = (start as f64 / 100.0, (start + len) as f64 / 100.0, step as f64 / 100.0);
            let axis = parse_axis(&format!("alpha={a}:{b}:{d}")).unwrap();
            proptest::prop_assert_eq!(axis.values[0], a);
            proptest::prop_assert_eq!(axis.values.len() as u32, len / step + 1);
            for w in axis.values.windows(2) {
                proptest::prop_assert!(w[0] < w[1]);
            }
            proptest::prop_assert!(*axis.values.last().unwrap() <= b + 1e-9);
        }
    }
}
