//! CSV datasets and group-map files.
//!
//! A dataset file has a header row and one sample per row. Feature cells are
//! decimal floats, concept cells `0`/`1`, the label an integer class id.
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written dataset reads back bit-identically.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use syncb_core::data::{singleton_groups, ConceptDataset};
use syncb_core::nn::Tensor;

use crate::config::CsvSource;

pub const LABEL_COLUMN: &str = "label";

pub fn feature_name(index: usize) -> String {
    format!("x{index:02}")
}

/// Load a CSV dataset with the column roles of `source`.
pub fn load_csv(source: &CsvSource) -> Result<ConceptDataset> {
    let text = fs::read_to_string(&source.path).with_context(|| format!("reading {}", source.path.display()))?;
    let mut dataset = parse_csv(&text, source).with_context(|| format!("in {}", source.path.display()))?;
    if let Some(groups_path) = &source.groups {
        let groups = read_groups(groups_path, dataset.concept_names())?;
        dataset = dataset.with_groups(groups)?;
    }
    Ok(dataset)
}

/// Parse CSV text; groups default to singletons.
pub fn parse_csv(text: &str, source: &CsvSource) -> Result<ConceptDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers().context("reading header row")?.iter().map(str::to_owned).collect();
    let position: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let column = |name: &str| position.get(name).copied().ok_or_else(|| anyhow!("missing column '{name}'"));

    let concept_cols = source.concepts.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?;
    let label_col = column(&source.label)?;
    let feature_cols = match &source.features {
        Some(names) => names.iter().map(|c| column(c)).collect::<Result<Vec<_>>>()?,
        None => (0..header.len())
            .filter(|i| *i != label_col && !concept_cols.contains(i))
            .collect(),
    };

    let mut features = Vec::new();
    let mut concepts = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.with_context(|| format!("row {row}"))?;
        let cell = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        for &i in &feature_cols {
            let v: f64 = cell(i)
                .parse()
                .map_err(|_| anyhow!("row {row}, column '{}': '{}' is not a number", header[i], cell(i)))?;
            features.push(v);
        }
        for &i in &concept_cols {
            let v = match cell(i) {
                "0" => 0,
                "1" => 1,
                other => bail!("row {row}, column '{}': concept value '{other}' is not 0 or 1", header[i]),
            };
            concepts.push(v);
        }
        let y: usize = cell(label_col)
            .parse()
            .map_err(|_| anyhow!("row {row}, column '{}': '{}' is not a class id", header[label_col], cell(label_col)))?;
        labels.push(y);
    }
    if labels.is_empty() {
        bail!("no data rows");
    }
    let n_classes = match source.n_classes {
        Some(k) => k,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let n = concept_cols.len();
    let features = Tensor::matrix(labels.len(), feature_cols.len(), features)?;
    Ok(ConceptDataset::new(
        features,
        concepts,
        labels,
        n_classes,
        singleton_groups(n),
        source.concepts.clone(),
    )?)
}

/// Render a dataset as CSV: features `x00…`, then concepts by name, then `label`.
pub fn dataset_to_csv(dataset: &ConceptDataset) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..dataset.feature_dim()).map(feature_name).collect();
    header.extend(dataset.concept_names().iter().cloned());
    header.push(LABEL_COLUMN.into());
    writer.write_record(&header)?;
    for s in 0..dataset.len() {
        let mut row: Vec<String> = dataset.features().row(s).iter().map(|v| format!("{v:?}")).collect();
        row.extend(dataset.concept_row(s).iter().map(|c| c.to_string()));
        row.push(dataset.labels()[s].to_string());
        writer.write_record(&row)?;
    }
    Ok(String::from_utf8(writer.into_inner()?)?)
}

/// One line per group, concept names joined by commas.
pub fn groups_to_text(dataset: &ConceptDataset) -> String {
    let names = dataset.concept_names();
    dataset
        .groups()
        .iter()
        .map(|g| g.iter().map(|&i| names[i].as_str()).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

pub fn parse_groups(text: &str, names: &[String]) -> Result<Vec<Vec<usize>>> {
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(line, l)| {
            l.split(',')
                .map(|name| {
                    let name = name.trim();
                    index
                        .get(name)
                        .copied()
                        .ok_or_else(|| anyhow!("group line {}: unknown concept '{name}'", line + 1))
                })
                .collect()
        })
        .collect()
}

pub fn read_groups(path: &Path, names: &[String]) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_groups(&text, names).with_context(|| format!("in {}", path.display()))
}

/// Column roles matching [`dataset_to_csv`] output.
pub fn schema_for(dataset: &ConceptDataset, csv_path: &Path, groups_path: Option<&Path>) -> CsvSource {
    CsvSource {
        path: csv_path.to_path_buf(),
        features: Some((0..dataset.feature_dim()).map(feature_name).collect()),
        concepts: dataset.concept_names().to_vec(),
        label: LABEL_COLUMN.into(),
        n_classes: Some(dataset.n_classes()),
        groups: groups_path.map(Path::to_path_buf),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source(concepts: &[&str]) -> CsvSource {
        CsvSource {
            path: "mem.csv".into(),
            features: None,
            concepts: concepts.iter().map(|s| s.to_string()).collect(),
            label: "y".into(),
            n_classes: None,
            groups: None,
        }
    }

    #[test]
    fn three_rows() {
        let text = "a,b,c,y\n0.5,1,0,1\n-2,3.25,1,0\n1e-3,0,1,2\n";
        let d = parse_csv(text, &source(&["c"])).unwrap();
        assert_eq!((d.len(), d.feature_dim(), d.n_concepts(), d.n_classes()), (3, 2, 1, 3));
        assert_eq!(d.features().row(1), &[-2.0, 3.25]);
        assert_eq!(d.concepts(), &[0, 1, 1]);
        assert_eq!(d.groups(), &[vec![0]]);
    }

    #[test]
    fn non_binary_concept_names_the_cell() {
        let err = parse_csv("a,c,y\n0.5,1,0\n1.5,2,1\n", &source(&["c"])).unwrap_err().to_string();
        assert!(err.contains("row 2") && err.contains("'c'") && err.contains("'2'"), "{err}");
    }

    #[test]
    fn empty_and_missing() {
        let err = parse_csv("a,c,y\n", &source(&["c"])).unwrap_err().to_string();
        assert_eq!(err, "no data rows");
        let err = parse_csv("a,c,y\n1,0,0\n", &source(&["d"])).unwrap_err().to_string();
        assert!(err.contains("missing column 'd'"), "{err}");
    }

    #[test]
    fn groups_parse_by_name() {
        let names: Vec<String> = ["p", "q", "r"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_groups("p,r\n\nq\n", &names).unwrap(), vec![vec![0, 2], vec![1]]);
        assert!(parse_groups("p,z\n", &names).is_err());
    }
}
