//! Row-wise averaging of per-seed metrics files.

use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use depaint_core::trainer::format_sig9;

/// Header and numeric rows of one metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let row = record
            .iter()
            .zip(&header)
            .map(|(field, column)| {
                field.trim().parse::<f64>().with_context(|| {
                    format!(
                        "{} row {}: column `{column}` is not numeric: {field:?}",
                        path.display(),
                        line + 1
                    )
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Arithmetic mean of every column, row by row.
pub fn average_tables(tables: &[Table]) -> Result<Table> {
    let Some(first) = tables.first() else {
        bail!("no metrics files to average");
    };
    for (i, t) in tables.iter().enumerate().skip(1) {
        if t.header != first.header {
            bail!(
                "file {} has header {:?}, expected {:?}",
                i + 1,
                t.header,
                first.header
            );
        }
        if t.rows.len() != first.rows.len() {
            bail!(
                "file {} has {} rows, expected {}",
                i + 1,
                t.rows.len(),
                first.rows.len()
            );
        }
    }
    let n = tables.len() as f64;
    let rows = (0..first.rows.len())
        .map(|r| {
            (0..first.header.len())
                .map(|c| tables.iter().map(|t| t.rows[r][c]).sum::<f64>() / n)
                .collect()
        })
        .collect();
    Ok(Table {
        header: first.header.clone(),
        rows,
    })
}

pub fn write_table(table: &Table, mut w: impl Write) -> Result<()> {
    writeln!(w, "{}", table.header.join(","))?;
    for row in &table.rows {
        let fields: Vec<String> = row.iter().map(|&x| format_sig9(x)).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn average_seeds(paths: &[impl AsRef<Path>], out: &Path) -> Result<()> {
    let tables = paths
        .iter()
        .map(|p| read_table(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let mean = average_tables(&tables)?;
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_table(&mean, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>) -> Table {
        Table {
            header: vec!["iter".into(), "obj_return".into()],
            rows,
        }
    }

    #[test]
    fn single_table_is_unchanged() {
        let t = table(vec![vec![1.0, -2.5], vec![2.0, 0.125]]);
        assert_eq!(average_tables(std::slice::from_ref(&t)).unwrap(), t);
    }

    #[test]
    fn two_tables_average() {
        let a = table(vec![vec![1.0, 1.0], vec![2.0, 5.0]]);
        let b = table(vec![vec![1.0, 3.0], vec![2.0, 7.0]]);
        let m = average_tables(&[a, b]).unwrap();
        assert_eq!(m.rows, vec![vec![1.0, 2.0], vec![2.0, 6.0]]);
    }

    #[test]
    fn row_counts_must_match() {
        let a = table(vec![vec![1.0, 1.0]]);
        let b = table(vec![vec![1.0, 1.0], vec![2.0, 2.0]]);
        assert!(average_tables(&[a, b])
            .unwrap_err()
            .to_string()
            .contains("rows"));
        assert!(average_tables(&[]).is_err());
    }

    #[test]
    fn written_integers_stay_integers() {
        let mut out = Vec::new();
        write_table(&table(vec![vec![3.0, 0.5]]), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "iter,obj_return\n3,0.5\n");
    }
}
