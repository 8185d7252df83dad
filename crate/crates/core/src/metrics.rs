//! Dice, per-combination evaluation tables, robustness curves and AURC.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CcsdError, Result};
use crate::lattice::{enumerate_combos, ModalityCombo};

/// A named evaluation region: the union of some label values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub name: String,
    pub label_set: Vec<u8>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, label_set: &[u8]) -> Self {
        Self {
            name: name.into(),
            label_set: label_set.to_vec(),
        }
    }

    /// WT = {1,2,3}, TC = {2,3}, ET = {3}, in the column order of the tables.
    pub fn nested() -> Vec<RegionSpec> {
        vec![
            RegionSpec::new("WT", &[1, 2, 3]),
            RegionSpec::new("TC", &[2, 3]),
            RegionSpec::new("ET", &[3]),
        ]
    }

    pub fn contains(&self, label: u8) -> bool {
        self.label_set.contains(&label)
    }
}

/// `2|a & b| / (|a| + |b|)`, 1.0 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CcsdError::ShapeMismatch {
            expected: vec![gt.len()],
            actual: vec![pred.len()],
        });
    }
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

pub fn region_masks(labels: &[u8], spec: &RegionSpec) -> Vec<bool> {
    labels.iter().map(|&l| spec.contains(l)).collect()
}

/// Dice of `pred` against `gt` for each region, in `regions` order.
pub fn region_dice(pred: &[u8], gt: &[u8], regions: &[RegionSpec]) -> Result<Vec<f64>> {
    regions
        .iter()
        .map(|r| dice(&region_masks(pred, r), &region_masks(gt, r)))
        .collect()
}

/// Per-combination, per-region Dice (case mean), in canonical combo order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub n_modalities: usize,
    pub regions: Vec<String>,
    pub rows: Vec<(ModalityCombo, Vec<f64>)>,
}

impl EvalTable {
    /// Builds a table after checking completeness and value ranges.
    pub fn new(n_modalities: usize, regions: Vec<String>, rows: Vec<(ModalityCombo, Vec<f64>)>) -> Result<Self> {
        let lattice = enumerate_combos(n_modalities)?;
        let mut sorted = rows;
        sorted.sort_by_key(|(c, _)| lattice.index_of(*c).unwrap_or(usize::MAX));
        if sorted.len() != lattice.len() || sorted.iter().zip(lattice.iter()).any(|((a, _), b)| a != b) {
            return Err(CcsdError::invalid(format!(
                "evaluation table must have exactly one row per combination ({} expected, {} given)",
                lattice.len(),
                sorted.len()
            )));
        }
        for (c, vals) in &sorted {
            if vals.len() != regions.len() {
                return Err(CcsdError::invalid(format!("row {c} has {} values for {} regions", vals.len(), regions.len())));
            }
            if let Some(v) = vals.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CcsdError::invalid(format!("row {c} has Dice {v} outside [0, 1]")));
            }
        }
        Ok(Self {
            n_modalities,
            regions,
            rows: sorted,
        })
    }

    pub fn row(&self, combo: ModalityCombo) -> Option<&[f64]> {
        self.rows.iter().find(|(c, _)| *c == combo).map(|(_, v)| v.as_slice())
    }

    pub fn region_index(&self, name: &str) -> Option<usize> {
        self.regions.iter().position(|r| r == name)
    }

    /// Unweighted mean over combinations, per region.
    pub fn averages(&self) -> Vec<f64> {
        let n = self.rows.len() as f64;
        (0..self.regions.len())
            .map(|r| self.rows.iter().map(|(_, v)| v[r]).sum::<f64>() / n)
            .collect()
    }

    /// Mean over regions of [`EvalTable::averages`].
    pub fn mean_dice(&self) -> f64 {
        let a = self.averages();
        a.iter().sum::<f64>() / a.len() as f64
    }

    /// `combo,WT,TC,ET` rows followed by an `Avg.` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("combo,{}\n", self.regions.join(","));
        let line = |s: &mut String, key: &str, vals: &[f64]| {
            let cells: Vec<String> = vals.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{key},{}", cells.join(","));
        };
        for (c, vals) in &self.rows {
            line(&mut s, &c.to_string(), vals);
        }
        line(&mut s, "Avg.", &self.averages());
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| CcsdError::invalid("empty evaluation table"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("combo") {
            return Err(CcsdError::invalid("evaluation table header must start with 'combo'"));
        }
        let regions: Vec<String> = cols.map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            let key = cells.next().unwrap_or_default();
            if key == "Avg." {
                continue;
            }
            let combo: ModalityCombo = key.parse()?;
            let vals = cells
                .map(|c| c.parse::<f64>().map_err(|e| CcsdError::invalid(format!("bad Dice value {c:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((combo, vals));
        }
        let n = rows.iter().map(|(c, _)| c.min_modalities()).max().unwrap_or(0);
        Self::new(n, regions, rows)
    }
}

/// Accumulates per-case region Dice for every combination.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    n_modalities: usize,
    regions: Vec<RegionSpec>,
    sums: Vec<(ModalityCombo, Vec<f64>)>,
    cases: usize,
}

impl EvalAccumulator {
    pub fn new(n_modalities: usize, regions: Vec<RegionSpec>) -> Result<Self> {
        let sums = enumerate_combos(n_modalities)?
            .iter()
            .map(|&c| (c, vec![0.0; regions.len()]))
            .collect();
        Ok(Self {
            n_modalities,
            regions,
            sums,
            cases: 0,
        })
    }

    /// Adds one case: `preds` holds a prediction per combination.
    pub fn add_case(&mut self, preds: &[(ModalityCombo, Vec<u8>)], gt: &[u8]) -> Result<()> {
        if preds.len() != self.sums.len() {
            return Err(CcsdError::invalid(format!(
                "expected predictions for {} combinations, got {}",
                self.sums.len(),
                preds.len()
            )));
        }
        for (combo, pred) in preds {
            let d = region_dice(pred, gt, &self.regions)?;
            let slot = self
                .sums
                .iter_mut()
                .find(|(c, _)| c == combo)
                .ok_or_else(|| CcsdError::invalid(format!("unknown combination {combo}")))?;
            for (s, v) in slot.1.iter_mut().zip(d) {
                *s += v;
            }
        }
        self.cases += 1;
        Ok(())
    }

    pub fn cases(&self) -> usize {
        self.cases
    }

    pub fn finish(self) -> Result<EvalTable> {
        if self.cases == 0 {
            return Err(CcsdError::invalid("no cases evaluated"));
        }
        let n = self.cases as f64;
        let rows = self
            .sums
            .into_iter()
            .map(|(c, v)| (c, v.into_iter().map(|s| (s / n).clamp(0.0, 1.0)).collect()))
            .collect();
        EvalTable::new(
            self.n_modalities,
            self.regions.into_iter().map(|r| r.name).collect(),
            rows,
        )
    }
}

/// Mean Dice per modality count, keyed `1..=N` in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    points: Vec<(usize, f64)>,
}

impl RobustnessCurve {
    pub fn new(points: Vec<(usize, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(CcsdError::invalid("robustness curve needs at least one point"));
        }
        if let Some((i, _)) = points.iter().enumerate().find(|(i, (c, _))| *c != i + 1) {
            return Err(CcsdError::invalid(format!(
                "robustness curve points must be keyed 1..=N in order (position {i} is out of place)"
            )));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(usize, f64)] {
        &self.points
    }
}

/// Groups the table by combination size for one region.
pub fn robustness_curve(table: &EvalTable, region: usize) -> Result<RobustnessCurve> {
    if region >= table.regions.len() {
        return Err(CcsdError::invalid(format!("region index {region} out of range")));
    }
    let n = table.n_modalities;
    let expected = enumerate_combos(n)?.len();
    if table.rows.len() != expected {
        return Err(CcsdError::invalid(format!(
            "incomplete table: {} of {expected} combinations",
            table.rows.len()
        )));
    }
    let mut sums = vec![(0.0, 0usize); n];
    for (c, v) in &table.rows {
        let slot = &mut sums[c.size() - 1];
        slot.0 += v[region];
        slot.1 += 1;
    }
    RobustnessCurve::new(
        sums.into_iter()
            .enumerate()
            .map(|(i, (s, k))| (i + 1, s / k as f64))
            .collect(),
    )
}

/// Trapezoidal area over `x = 1..N`.
pub fn raw_area(curve: &RobustnessCurve) -> Result<f64> {
    let p = curve.points();
    if p.len() < 2 {
        return Err(CcsdError::invalid("area under a single-point curve is undefined"));
    }
    Ok(p.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1)).sum())
}

/// Area normalized by `N - 1`, so a constant curve at `d` scores `d`.
pub fn aurc(curve: &RobustnessCurve) -> Result<f64> {
    Ok(raw_area(curve)? / (curve.points().len() - 1) as f64)
}

/// `count,WT,TC,ET` with the per-region curve values.
pub fn robustness_csv(table: &EvalTable) -> Result<String> {
    let curves = (0..table.regions.len())
        .map(|r| robustness_curve(table, r))
        .collect::<Result<Vec<_>>>()?;
    let mut s = format!("count,{}\n", table.regions.join(","));
    for i in 0..table.n_modalities {
        let cells: Vec<String> = curves.iter().map(|c| c.points()[i].1.to_string()).collect();
        let _ = writeln!(s, "{},{}", i + 1, cells.join(","));
    }
    Ok(s)
}

/// `region,aurc,raw_area` per region.
pub fn aurc_csv(table: &EvalTable) -> Result<String> {
    let mut s = String::from("region,aurc,raw_area\n");
    for (r, name) in table.regions.iter().enumerate() {
        let curve = robustness_curve(table, r)?;
        let _ = writeln!(s, "{name},{},{}", aurc(&curve)?, raw_area(&curve)?);
    }
    Ok(s)
}

/// Per-region AURC values in table region order.
pub fn aurc_per_region(table: &EvalTable) -> Result<Vec<(String, f64)>> {
    table
        .regions
        .iter()
        .enumerate()
        .map(|(r, name)| Ok((name.clone(), aurc(&robustness_curve(table, r)?)?)))
        .collect()
}

/// Line chart of the robustness curves as a standalone SVG document.
pub fn render_curve_svg(table: &EvalTable) -> Result<String> {
    let (w, h, pad) = (480.0, 320.0, 40.0);
    let n = table.n_modalities.max(2);
    let x = |c: usize| pad + (c - 1) as f64 * (w - 2.0 * pad) / (n - 1) as f64;
    let y = |d: f64| h - pad - d * (h - 2.0 * pad);
    let colors = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    for c in 1..=table.n_modalities {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">{c}</text>", x(c) - 4.0, h - pad + 16.0);
    }
    for (r, name) in table.regions.iter().enumerate() {
        let curve = robustness_curve(table, r)?;
        let pts: Vec<String> = curve.points().iter().map(|&(c, d)| format!("{:.1},{:.1}", x(c), y(d))).collect();
        let color = colors[r % colors.len()];
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>", w - pad + 4.0, pad + 14.0 * r as f64);
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `eval_table.csv`, `robustness_curve.csv` and `aurc.csv` into `dir`.
pub fn write_reports(table: &EvalTable, dir: &Path, render_plots: bool) -> Result<()> {
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| CcsdError::io(&p, e))
    };
    write("eval_table.csv", table.to_csv())?;
    write("robustness_curve.csv", robustness_csv(table)?)?;
    write("aurc.csv", aurc_csv(table)?)?;
    if render_plots {
        write("robustness_curve.svg", render_curve_svg(table)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_from(n: usize, f: impl Fn(ModalityCombo) -> f64) -> EvalTable {
        let rows = enumerate_combos(n).unwrap().iter().map(|&c| (c, vec![f(c); 3])).collect();
        EvalTable::new(n, vec!["WT".into(), "TC".into(), "ET".into()], rows).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = [true, true, false, false];
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&a, &[false, true, true, false]).unwrap(), 0.5);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice(&a, &[true]).is_err());
    }

    #[test]
    fn region_examples() {
        let specs = RegionSpec::nested();
        assert!(region_masks(&[0, 0, 0], &specs[0]).iter().all(|&b| !b));
        let labels = [0u8, 1, 2, 3, 3, 2, 1, 0, 3];
        let mut hist = [0usize; 4];
        for &l in &labels {
            hist[l as usize] += 1;
        }
        for spec in &specs {
            let count = region_masks(&labels, spec).iter().filter(|&&b| b).count();
            let expected: usize = spec.label_set.iter().map(|&l| hist[l as usize]).sum();
            assert_eq!(count, expected);
        }
    }

    #[test]
    fn curve_examples() {
        let t = table_from(4, |_| 0.8);
        let c = robustness_curve(&t, 0).unwrap();
        assert!(c.points().iter().all(|&(_, d)| (d - 0.8).abs() < 1e-12));
        assert!((aurc(&c).unwrap() - 0.8).abs() < 1e-12);
        let sizes: Vec<usize> = (1..=4).map(|k| t.rows.iter().filter(|(c, _)| c.size() == k).count()).collect();
        assert_eq!(sizes, vec![4, 6, 4, 1]);
        let lin = RobustnessCurve::new(vec![(1, 0.6), (2, 0.7), (3, 0.8), (4, 0.9)]).unwrap();
        assert!((aurc(&lin).unwrap() - 0.75).abs() < 1e-9);
        assert!((raw_area(&lin).unwrap() - 2.25).abs() < 1e-9);
        assert!(RobustnessCurve::new(vec![(2, 0.7), (1, 0.6)]).is_err());
        assert!(aurc(&RobustnessCurve::new(vec![(1, 0.6)]).unwrap()).is_err());
    }

    #[test]
    fn hand_table_group_by() {
        let t = table_from(4, |c| c.bits() as f64 / 16.0);
        let c = robustness_curve(&t, 1).unwrap();
        // brute-force group-by over bitmasks 1..16
        for k in 1..=4u32 {
            let vals: Vec<f64> = (1u32..16).filter(|b| b.count_ones() == k).map(|b| b as f64 / 16.0).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((c.points()[k as usize - 1].1 - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn table_validation_and_csv() {
        let t = table_from(3, |c| c.size() as f64 / 4.0);
        let csv = t.to_csv();
        assert!(csv.starts_with("combo,WT,TC,ET\n1,"));
        assert!(csv.lines().last().unwrap().starts_with("Avg.,"));
        assert_eq!(EvalTable::from_csv(&csv).unwrap(), t);
        let mut rows = t.rows.clone();
        rows.pop();
        assert!(EvalTable::new(3, t.regions.clone(), rows).is_err());
        let mut rows = t.rows.clone();
        rows[0].1[0] = 1.5;
        assert!(EvalTable::new(3, t.regions.clone(), rows).is_err());
        let rc = robustness_csv(&t).unwrap();
        assert_eq!(rc.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect::<Vec<_>>(), ["1", "2", "3"]);
    }

    #[test]
    fn accumulator_case_mean() {
        let mut acc = EvalAccumulator::new(1, RegionSpec::nested()).unwrap();
        let full = ModalityCombo::full(1).unwrap();
        acc.add_case(&[(full, vec![3, 0])], &[3, 0]).unwrap();
        acc.add_case(&[(full, vec![0, 0])], &[3, 0]).unwrap();
        let t = acc.finish().unwrap();
        assert_eq!(t.row(full).unwrap(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn svg_renders() {
        let svg = render_curve_svg(&table_from(4, |_| 0.5)).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }

    proptest! {
        #[test]
        fn dice_symmetric(a in prop::collection::vec(any::<bool>(), 20), b in prop::collection::vec(any::<bool>(), 20)) {
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn aurc_monotone(vals in prop::collection::vec(0.0f64..0.9, 4), i in 0usize..4, bump in 0.001f64..0.1) {
            let c = RobustnessCurve::new(vals.iter().enumerate().map(|(k, &v)| (k + 1, v)).collect()).unwrap();
            let mut raised = vals.clone();
            raised[i] += bump;
            let r = RobustnessCurve::new(raised.iter().enumerate().map(|(k, &v)| (k + 1, v)).collect()).unwrap();
            prop_assert!(aurc(&r).unwrap() > aurc(&c).unwrap());
        }

        #[test]
        fn nesting_holds(labels in prop::collection::vec(0u8..4, 50)) {
            let specs = RegionSpec::nested();
            let m: Vec<Vec<bool>> = specs.iter().map(|s| region_masks(&labels, s)).collect();
            for ((&wt, &tc), &et) in m[0].iter().zip(&m[1]).zip(&m[2]) {
                prop_assert!(!et || tc);
                prop_assert!(!tc || wt);
            }
        }

        #[test]
        fn averages_are_row_means(vals in prop::collection::vec(0.0f64..1.0, 15)) {
            let rows: Vec<_> = enumerate_combos(4).unwrap().iter().zip(&vals).map(|(&c, &v)| (c, vec![v, 1.0 - v, v * v])).collect();
            let t = EvalTable::new(4, vec!["WT".into(), "TC".into(), "ET".into()], rows).unwrap();
            let a = t.averages();
            let brute = vals.iter().sum::<f64>() / 15.0;
            prop_assert!((a[0] - brute).abs() < 1e-12);
            prop_assert!((a[1] - (1.0 - brute)).abs() < 1e-12);
        }
    }
}
