//! Result emission: numeric CSV tables, key-value reports, and text
//! snapshots of ensembles and spectral fields.
//!
//! Floats are written with `{:?}`, the shortest representation that parses
//! back to the same value, so `parse(emit(x)) == x` holds exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::meanfield::SpectralField;
use crate::particles::ParticleEnsemble;
use crate::spin::Spin;
use crate::torus::cube_indices;

/// A rectangular table of floats with named columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match the header");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            let cells: Vec<String> = r.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?;
        let columns: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let row = l
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", i + 1)))?;
            if row.len() != columns.len() {
                return Err(Error::Parse(format!("row {} has {} cells, expected {}", i + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }
}

/// Ordered `key = value` lines followed by named table sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub entries: Vec<(String, String)>,
    pub sections: Vec<(String, Table)>,
}

impl Report {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("{value:?}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key)?.parse().ok()
    }

    pub fn section(&self, name: &str) -> Option<&Table> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (name, t) in &self.sections {
            let _ = write!(s, "\n[{name}]\n{}", t.to_csv());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Report::default();
        let mut current: Option<(String, String)> = None;
        for line in text.lines() {
            let trimmed = line.trim();
            if let Some(name) = trimmed.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                if let Some((n, body)) = current.take() {
                    out.sections.push((n, Table::parse_csv(&body)?));
                }
                current = Some((name.to_string(), String::new()));
            } else if let Some((_, body)) = current.as_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !trimmed.is_empty() {
                let (k, v) = trimmed
                    .split_once(" = ")
                    .ok_or_else(|| Error::Parse(format!("expected `key = value`, got {trimmed:?}")))?;
                out.entries.push((k.to_string(), v.to_string()));
            }
        }
        if let Some((n, body)) = current {
            out.sections.push((n, Table::parse_csv(&body)?));
        }
        Ok(out)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn header_fields<'a>(line: &'a str, kind: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = line
        .strip_prefix("# ")
        .and_then(|r| r.strip_prefix(kind))
        .ok_or_else(|| Error::Parse(format!("expected a `# {kind}` header")))?;
    rest.split_whitespace()
        .map(|f| f.split_once('=').ok_or_else(|| Error::Parse(format!("bad header field {f:?}"))))
        .collect()
}

fn field_value<T: std::str::FromStr>(fields: &[(&str, &str)], key: &str) -> Result<T> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| Error::Parse(format!("missing or malformed header field {key}")))
}

/// `# ensemble d=.. n=.. t=.. seed=..` followed by `x0,..,y` rows.
pub fn ensemble_to_text(ens: &ParticleEnsemble, seed: u64) -> String {
    let d = ens.dim();
    let mut s = format!("# ensemble d={d} n={} t={:?} seed={seed}\n", ens.len(), ens.time());
    let cols: Vec<String> = (0..d).map(|c| format!("x{c}")).chain(["y".to_string()]).collect();
    s.push_str(&cols.join(","));
    s.push('\n');
    for (i, y) in ens.spins().iter().enumerate() {
        for x in ens.position(i) {
            let _ = write!(s, "{x:?},");
        }
        let _ = writeln!(s, "{}", y.value());
    }
    s
}

/// Inverse of [`ensemble_to_text`]; returns the ensemble and the seed.
pub fn parse_ensemble(text: &str) -> Result<(ParticleEnsemble, u64)> {
    let mut lines = text.lines();
    let fields = header_fields(lines.next().unwrap_or(""), "ensemble")?;
    let d: usize = field_value(&fields, "d")?;
    let n: usize = field_value(&fields, "n")?;
    let t: f64 = field_value(&fields, "t")?;
    let seed: u64 = field_value(&fields, "seed")?;
    let table = Table::parse_csv(&lines.collect::<Vec<_>>().join("\n"))?;
    if table.columns.len() != d + 1 || table.rows.len() != n {
        return Err(Error::Parse("ensemble body does not match its header".into()));
    }
    let mut positions = Vec::with_capacity(n * d);
    let mut spins = Vec::with_capacity(n);
    for r in &table.rows {
        positions.extend_from_slice(&r[..d]);
        spins.push(Spin::from_value(r[d] as i64).map_err(|e| Error::Parse(e.to_string()))?);
    }
    Ok((ParticleEnsemble::new(d, positions, spins, t)?, seed))
}

/// `# field d=.. k_max=.. t=..` followed by `k0,..,u,v` rows in storage order.
pub fn field_to_text(field: &SpectralField) -> String {
    let d = field.dim();
    let mut s = format!("# field d={d} k_max={} t={:?}\n", field.k_max(), field.time());
    let cols: Vec<String> = (0..d)
        .map(|c| format!("k{c}"))
        .chain(["u".to_string(), "v".to_string()])
        .collect();
    s.push_str(&cols.join(","));
    s.push('\n');
    for (i, k) in field.indices().iter().enumerate() {
        for c in k {
            let _ = write!(s, "{c},");
        }
        let _ = writeln!(s, "{:?},{:?}", field.u()[i], field.v()[i]);
    }
    s
}

pub fn parse_field(text: &str) -> Result<SpectralField> {
    let mut lines = text.lines();
    let fields = header_fields(lines.next().unwrap_or(""), "field")?;
    let d: usize = field_value(&fields, "d")?;
    let k_max: u32 = field_value(&fields, "k_max")?;
    let t: f64 = field_value(&fields, "t")?;
    let table = Table::parse_csv(&lines.collect::<Vec<_>>().join("\n"))?;
    let expected = cube_indices(d, k_max);
    if table.columns.len() != d + 2 || table.rows.len() != expected.len() {
        return Err(Error::Parse("field body does not match its header".into()));
    }
    for (r, k) in table.rows.iter().zip(&expected) {
        if r[..d].iter().zip(k).any(|(a, &b)| *a != b as f64) {
            return Err(Error::Parse("field rows are not in storage order".into()));
        }
    }
    let u = table.rows.iter().map(|r| r[d]).collect();
    let v = table.rows.iter().map(|r| r[d + 1]).collect();
    SpectralField::new(d, k_max, u, v, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meanfield::ProfileTerm;
    use crate::spin::SpinLaw;
    use proptest::prelude::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(&["eta", "amplitude", "residual"]);
        assert_eq!(t.to_csv(), "eta,amplitude,residual\n");
        assert_eq!(Table::parse_csv(&t.to_csv()).unwrap(), t);
    }

    #[test]
    fn report_round_trip() {
        let mut r = Report::default();
        r.set("label", "theorem regime");
        r.set_f64("eta_star", 0.1 + 0.2);
        let mut t = Table::new(&["k0", "eta_k"]);
        t.push(vec![1.0, f64::INFINITY]);
        t.push(vec![2.0, -3.5e-17]);
        r.sections.push(("modes".into(), t));
        r.sections.push(("empty".into(), Table::new(&["a"])));
        let back = Report::parse(&r.render()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.get_f64("eta_star"), Some(0.1 + 0.2));
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(Table::parse_csv("a,b\n1.0\n").is_err());
        assert!(Table::parse_csv("a\nnope\n").is_err());
        assert!(Report::parse("no separator here").is_err());
    }

    #[test]
    fn snapshots_round_trip() {
        let ens = ParticleEnsemble::new(2, vec![0.1, 0.2, 0.3, 0.999], vec![Spin::Plus, Spin::Minus], 0.25).unwrap();
        let (back, seed) = parse_ensemble(&ensemble_to_text(&ens, 42)).unwrap();
        assert_eq!(back, ens);
        assert_eq!(seed, 42);
        let field = SpectralField::product_form(
            2,
            3,
            SpinLaw::new(0.3).unwrap(),
            &[ProfileTerm { k: vec![1, 2], u: 0.2, v: -0.1 }],
        )
        .unwrap()
        .with_time(1.5);
        assert_eq!(parse_field(&field_to_text(&field)).unwrap(), field);
        assert!(parse_field("# ensemble d=1 n=0 t=0.0 seed=1\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip(rows in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("nan", |x| !x.is_nan()), 3), 0..20)) {
            let mut t = Table::new(&["a", "b", "c"]);
            for r in rows {
                t.push(r);
            }
            prop_assert_eq!(Table::parse_csv(&t.to_csv()).unwrap(), t);
        }
    }
}
