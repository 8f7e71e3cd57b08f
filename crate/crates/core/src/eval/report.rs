use std::collections::BTreeMap;
use std::fmt::Write;

use super::{cross_judge_average, CostProfile, Decimal2, RobustnessResult};

fn table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i == 0 {
                let _ = write!(s, "{:<w$}", cell, w = widths[i]);
            } else {
                let _ = write!(s, "  {:>w$}", cell, w = widths[i]);
            }
        }
        s.trim_end().to_string()
    };
    let rule = "-".repeat(widths.iter().sum::<usize>() + 2 * (cols - 1));
    let mut out = String::new();
    let _ = writeln!(out, "{}", line(header));
    let _ = writeln!(out, "{rule}");
    for row in rows {
        let _ = writeln!(out, "{}", line(row));
    }
    out
}

/// One AUC column per dataset and an average column.
pub fn render_auc_table(method: &str, rows: &[(String, f64)]) -> String {
    let mut header = vec!["Method".to_string()];
    header.extend(rows.iter().map(|(name, _)| name.clone()));
    header.push("Avg".into());
    let mut cells = vec![method.to_string()];
    cells.extend(rows.iter().map(|(_, auc)| format!("{:.4}", auc)));
    let avg = if rows.is_empty() { f64::NAN } else { rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64 };
    cells.push(format!("{avg:.4}"));
    table(&header, &[cells])
}

/// Per-set adversarial counts and rates, then the pooled column.
pub fn render_robustness_table(sets: &[(String, RobustnessResult)], pooled: Option<&RobustnessResult>) -> String {
    let mut header = vec!["Metric".to_string()];
    header.extend(sets.iter().map(|(n, _)| n.clone()));
    if pooled.is_some() {
        header.push("Weighted".into());
    }
    let all: Vec<&RobustnessResult> = sets.iter().map(|(_, r)| r).chain(pooled).collect();
    let row = |name: &str, f: &dyn Fn(&RobustnessResult) -> String| {
        std::iter::once(name.to_string()).chain(all.iter().map(|r| f(r))).collect::<Vec<_>>()
    };
    table(
        &header,
        &[
            row("Adversarial", &|r| r.adversarial.to_string()),
            row("Correct", &|r| r.correct.to_string()),
            row("Robustness Rate (%)", &|r| r.rate.to_string()),
        ],
    )
}

pub fn render_cost_table(profile: &CostProfile, ratios: &BTreeMap<String, Decimal2>) -> String {
    let rows: Vec<Vec<String>> = profile
        .components
        .iter()
        .map(|(name, g)| {
            vec![name.clone(), format!("{g}"), format!("{}%", ratios.get(name).map_or("-".into(), |d| d.to_string()))]
        })
        .collect();
    table(&["Component".into(), "GFLOPs".into(), "Ratio".into()], &rows)
}

/// Rows are explained models, columns are judges, plus the cross-judge
/// average.
pub fn render_judge_table(judges: &[String], rows: &[(String, Vec<Option<Decimal2>>)]) -> String {
    let mut header = vec!["Model".to_string()];
    header.extend(judges.iter().cloned());
    header.push("Avg.".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(model, means)| {
            let mut cells = vec![model.clone()];
            cells.extend(means.iter().map(|m| m.map_or("-".into(), |d| d.to_string())));
            let present: Vec<Decimal2> = means.iter().flatten().copied().collect();
            cells.push(cross_judge_average(&present).map_or("-".into(), |d| d.to_string()));
            cells
        })
        .collect();
    table(&header, &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_table_average() {
        let t = render_judge_table(
            &["J1".into(), "J2".into()],
            &[("ours".into(), vec![Some("7.55".parse().unwrap()), Some("7.78".parse().unwrap())])],
        );
        assert!(t.lines().nth(2).unwrap().ends_with("7.66"));
    }

    #[test]
    fn robustness_table_layout() {
        let a = RobustnessResult::from_counts(34, 32).unwrap();
        let t = render_robustness_table(&[("CDF".into(), a)], Some(&a));
        assert!(t.contains("Robustness Rate (%)"));
        assert!(t.contains("94.12"));
        assert_eq!(t.lines().count(), 5);
    }

    #[test]
    fn cost_table() {
        let p = CostProfile::new([("retrieval", 81.0)]);
        let r = super::super::cost_ratio(&p).unwrap();
        assert!(render_cost_table(&p, &r).contains("100.00%"));
    }
}
