//! Reader and schema check for sweep CSVs, the format downstream plotting
//! consumes: a sweep column (`dim`, `alpha`, `ensemble_size` or `gamma0`)
//! followed by one `err_<method>` column per method.

use anyhow::{bail, Context, Result};

pub const SWEEP_COLUMNS: [&str; 4] = ["dim", "alpha", "ensemble_size", "gamma0"];

/// Parsed sweep table; `None` cells are failed evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub sweep_column: String,
    pub x: Vec<f64>,
    /// Method labels without the `err_` prefix.
    pub methods: Vec<String>,
    /// `values[row][method]`
    pub values: Vec<Vec<Option<f64>>>,
}

impl SweepTable {
    pub fn column(&self, method: &str) -> Option<Vec<Option<f64>>> {
        let j = self.methods.iter().position(|m| m == method)?;
        Some(self.values.iter().map(|row| row[j]).collect())
    }

    pub fn failed_cells(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_none()).count()
    }
}

pub fn parse_sweep_csv(text: &str) -> Result<SweepTable> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().context("empty file")?;
    let mut cols = header.split(',');
    let sweep_column = cols.next().unwrap_or_default().to_string();
    if !SWEEP_COLUMNS.contains(&sweep_column.as_str()) {
        bail!("unknown sweep column {sweep_column:?}");
    }
    let mut methods = Vec::new();
    for c in cols {
        let Some(m) = c.strip_prefix("err_").filter(|m| !m.is_empty()) else {
            bail!("column {c:?} is not of the form err_<method>");
        };
        if methods.iter().any(|x| x == m) {
            bail!("duplicate column {c:?}");
        }
        methods.push(m.to_string());
    }
    if methods.is_empty() {
        bail!("no method columns");
    }
    let mut x = Vec::new();
    let mut values = Vec::new();
    for (n, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != methods.len() + 1 {
            bail!("line {}: {} fields, expected {}", n + 1, fields.len(), methods.len() + 1);
        }
        x.push(number(fields[0]).with_context(|| format!("line {}", n + 1))?);
        let row = fields[1..]
            .iter()
            .map(|f| if f.is_empty() { Ok(None) } else { number(f).map(Some) })
            .collect::<Result<Vec<_>>>()
            .with_context(|| format!("line {}", n + 1))?;
        values.push(row);
    }
    if x.is_empty() {
        bail!("no data rows");
    }
    Ok(SweepTable {
        sweep_column,
        x,
        methods,
        values,
    })
}

fn number(s: &str) -> Result<f64> {
    let v: f64 = s.parse().with_context(|| format!("{s:?} is not a number"))?;
    if !v.is_finite() {
        bail!("{s:?} is not finite");
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::ExperimentReport;

    fn report() -> ExperimentReport {
        ExperimentReport {
            sweep_column: "dim".into(),
            points: vec!["2".into(), "4".into()],
            methods: vec!["pca".into(), "lis_0.5".into()],
            values: vec![
                vec![vec![Some(3.0), Some(1.0), Some(2.0)], vec![Some(0.5); 3]],
                vec![vec![Some(1e-3); 3], vec![None, Some(1.0), Some(1.0)]],
            ],
            failures: vec![],
        }
    }

    #[test]
    fn round_trips_report_output() {
        let t = parse_sweep_csv(&report().to_csv()).unwrap();
        assert_eq!(t.sweep_column, "dim");
        assert_eq!(t.x, [2.0, 4.0]);
        assert_eq!(t.methods, ["pca", "lis_0.5"]);
        assert_eq!(t.column("pca").unwrap(), [Some(2.0), Some(1e-3)]);
        assert_eq!(t.column("lis_0.5").unwrap(), [Some(0.5), None]);
        assert_eq!(t.failed_cells(), 1);
    }

    #[test]
    fn rejects_malformed_tables() {
        for bad in [
            "",
            "rank,err_pca\n1,2\n",
            "dim,pca\n1,2\n",
            "dim,err_\n1,2\n",
            "dim,err_a,err_a\n1,2,3\n",
            "dim\n1\n",
            "dim,err_a\n",
            "dim,err_a\n1,2,3\n",
            "dim,err_a\nx,2\n",
            "dim,err_a\n1,inf\n",
        ] {
            assert!(parse_sweep_csv(bad).is_err(), "{bad:?}");
        }
    }
}
