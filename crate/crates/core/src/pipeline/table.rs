// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effective-depth grid: one row per model, an `ED`/`Ratio` column pair for
//! every criterion × domain.

use std::path::Path;

use crate::error::{Error, Result};
use crate::probes::{Criterion, EffectiveDepthReport};
use crate::trajectory::Domain;

/// Renders the grid. Domains appear in [`Domain::ALL`] order and only when
/// some report covers them; missing cells are left empty.
pub fn ed_table_csv(reports: &[EffectiveDepthReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Param("no effective-depth reports to tabulate".into()));
    }
    let mut models: Vec<(&str, usize)> = Vec::new();
    for r in reports {
        match models.iter().find(|(label, _)| *label == r.model_label) {
            Some(&(_, l)) if l != r.n_layers => {
                return Err(Error::Param(format!(
                    "model `{}` reported with {} and {} layers",
                    r.model_label, l, r.n_layers
                )));
            }
            Some(_) => {}
            None => models.push((&r.model_label, r.n_layers)),
        }
        if reports
            .iter()
            .filter(|o| o.model_label == r.model_label && o.domain == r.domain)
            .count()
            > 1
        {
            return Err(Error::Param(format!(
                "model `{}` has more than one report for {}",
                r.model_label, r.domain
            )));
        }
    }
    let domains: Vec<Domain> = Domain::ALL
        .into_iter()
        .filter(|d| reports.iter().any(|r| r.domain == *d))
        .collect();

    let mut out = String::from("model,layers");
    for c in Criterion::ALL {
        for d in &domains {
            out.push_str(&format!(",{}_{d}_ed,{}_{d}_ratio", c.as_str(), c.as_str()));
        }
    }
    out.push('\n');
    for (label, n_layers) in models {
        out.push_str(&format!("{label},{n_layers}"));
        for c in Criterion::ALL {
            for d in &domains {
                match reports.iter().find(|r| r.model_label == label && r.domain == *d) {
                    Some(r) => {
                        let cd = r.criterion(c);
                        out.push_str(&format!(",{},{}", cd.ed, cd.ratio_display));
                    }
                    None => out.push_str(",,"),
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes [`ed_table_csv`] to `path`; nothing is written on error.
pub fn emit_ed_table(reports: &[EffectiveDepthReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv = ed_table_csv(reports)?;
    std::fs::write(path, csv).map_err(|e| Error::io(path, e))
}
