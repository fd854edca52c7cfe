//! Line-oriented text format for pre-extracted features.
//!
//! ```text
//! #FRFEAT v1 C=4 M=3,2
//! 1,1;0,0.5 -1 2,|,0.25 0
//! ```
//!
//! The header gives the class count and per-modality dimensions. Each row is
//! `label,presence,feat_0,|,feat_1,...` where presence is a `;`-separated list
//! of `0`/`1` flags and each modality's values are space-separated. Values are
//! written in shortest round-trip form, so save followed by load is exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::MultimodalExample;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub num_classes: usize,
    pub modality_dims: Vec<usize>,
}

pub fn render_features(header: &FeatureHeader, examples: &[MultimodalExample]) -> String {
    let dims: Vec<String> = header.modality_dims.iter().map(|d| d.to_string()).collect();
    let mut out = format!("#FRFEAT v1 C={} M={}\n", header.num_classes, dims.join(","));
    for e in examples {
        let flags: Vec<&str> = e.present.iter().map(|&p| if p { "1" } else { "0" }).collect();
        write!(out, "{},{}", e.label, flags.join(";")).unwrap();
        for (m, f) in e.features.iter().enumerate() {
            if m > 0 {
                out.push_str(",|");
            }
            out.push(',');
            let vals: Vec<String> = f.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
        }
        out.push('\n');
    }
    out
}

pub fn save_features(path: &Path, header: &FeatureHeader, examples: &[MultimodalExample]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, render_features(header, examples))?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<(FeatureHeader, Vec<MultimodalExample>)> {
    let text = fs::read_to_string(path)?;
    parse_features(&text, &path.display().to_string())
}

fn parse_header(line: &str) -> std::result::Result<FeatureHeader, String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#FRFEAT") || parts.next() != Some("v1") {
        return Err(format!("expected header `#FRFEAT v1 C=<classes> M=<dims>`, got `{line}`"));
    }
    let mut classes = None;
    let mut dims = None;
    for p in parts {
        if let Some(c) = p.strip_prefix("C=") {
            classes = Some(c.parse::<usize>().map_err(|e| format!("bad class count `{c}`: {e}"))?);
        } else if let Some(m) = p.strip_prefix("M=") {
            let d: std::result::Result<Vec<usize>, _> = m.split(',').map(str::parse).collect();
            dims = Some(d.map_err(|e| format!("bad modality dims `{m}`: {e}"))?);
        } else {
            return Err(format!("unexpected header field `{p}`"));
        }
    }
    let num_classes = classes.ok_or("header lacks C=")?;
    let modality_dims = dims.ok_or("header lacks M=")?;
    if num_classes == 0 || modality_dims.is_empty() || modality_dims.contains(&0) {
        return Err("header declares an empty class or modality set".into());
    }
    Ok(FeatureHeader { num_classes, modality_dims })
}

/// Parses a feature file; errors carry the 1-based line number and, for data
/// rows, the 0-based row index.
pub fn parse_features(text: &str, source: &str) -> Result<(FeatureHeader, Vec<MultimodalExample>)> {
    let fail = |line: usize, msg: String| Error::Format { path: source.to_string(), line, msg };
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| fail(1, "empty file, missing header".into()))?;
    let header = parse_header(first.trim()).map_err(|m| fail(1, m))?;
    let nm = header.modality_dims.len();
    let mut examples = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = examples.len();
        let err = |msg: String| fail(lineno, format!("row {row}: {msg}"));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 * nm + 1 {
            return Err(err(format!("expected {} comma-separated fields, got {}", 2 * nm + 1, fields.len())));
        }
        let label: usize = fields[0].trim().parse().map_err(|e| err(format!("bad label `{}`: {e}", fields[0])))?;
        let present: Vec<bool> = fields[1]
            .split(';')
            .map(|f| match f.trim() {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(err(format!("bad presence flag `{other}`"))),
            })
            .collect::<Result<_>>()?;
        if present.len() != nm {
            return Err(err(format!("{} presence flags for {nm} modalities", present.len())));
        }
        let mut features = Vec::with_capacity(nm);
        for m in 0..nm {
            if m > 0 && fields[2 * m + 1].trim() != "|" {
                return Err(err(format!("expected `|` before modality {m}")));
            }
            let raw = fields[2 * m + 2];
            let vals: Vec<f64> = raw
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("modality {m}: bad value `{v}`: {e}"))))
                .collect::<Result<_>>()?;
            features.push(vals);
        }
        let ex = MultimodalExample { label, features, present };
        ex.validate(header.num_classes, &header.modality_dims).map_err(err)?;
        examples.push(ex);
    }
    Ok((header, examples))
}
