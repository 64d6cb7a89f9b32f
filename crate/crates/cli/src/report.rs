//! Comparison tables over evaluation reports. The first report is the
//! baseline for the delta columns.

use std::fmt::Write as _;

use t2m_core::metrics::EvalReport;
use t2m_core::perturb::PerturbationReport;

pub struct Row {
    pub label: String,
    pub report: EvalReport,
}

const SHOWN: [&str; 10] = [
    "fid",
    "fid_p",
    "fid_d",
    "mm_dist",
    "diversity",
    "attention_jsd_mean",
    "overlap_ratio_mean",
    "token_accuracy",
    "token_accuracy_perturbed",
    "prediction_flip_rate",
];

fn value(r: &EvalReport, name: &str) -> f64 {
    r.metrics()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, v)| v)
        .expect("column names come from EvalReport::metrics")
}

/// `fid_d` of each row minus that of the first row.
pub fn delta_fid_d(rows: &[Row]) -> Vec<f64> {
    let base = rows.first().map_or(0.0, |r| r.report.fid_d);
    rows.iter().map(|r| r.report.fid_d - base).collect()
}

pub fn comparison_csv(rows: &[Row]) -> String {
    let mut out = format!("label,{},delta_fid_d,delta_fid_d_pct\n", SHOWN.join(","));
    let base = rows.first().map_or(0.0, |r| r.report.fid_d);
    for (row, delta) in rows.iter().zip(delta_fid_d(rows)) {
        let values: Vec<String> = SHOWN
            .iter()
            .map(|c| value(&row.report, c).to_string())
            .collect();
        let pct = if base == 0.0 {
            0.0
        } else {
            100.0 * delta / base
        };
        writeln!(out, "{},{},{delta},{pct}", row.label, values.join(",")).unwrap();
    }
    out
}

pub fn comparison_text(rows: &[Row]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
    let headers = [
        "fid", "fid_p", "fid_d", "Δfid_d", "mm_dist", "div", "jsd", "V_k", "acc", "acc_p", "flip",
    ];
    let mut out = format!("{:<width$}", "model");
    for h in headers {
        write!(out, " {h:>10}").unwrap();
    }
    out.push('\n');
    for (row, delta) in rows.iter().zip(delta_fid_d(rows)) {
        let r = &row.report;
        write!(out, "{:<width$}", row.label).unwrap();
        let cells = [
            r.fid,
            r.fid_p,
            r.fid_d,
            delta,
            r.mm_dist,
            r.diversity,
            r.attention_jsd_mean,
            r.overlap_ratio_mean,
            r.token_accuracy,
            r.token_accuracy_perturbed,
            r.prediction_flip_rate,
        ];
        for c in cells {
            write!(out, " {:>10}", format_cell(c)).unwrap();
        }
        out.push('\n');
    }
    out
}

fn format_cell(x: f64) -> String {
    if x != 0.0 && x.abs() < 1e-3 {
        format!("{x:.3e}")
    } else {
        format!("{x:.5}")
    }
}

/// One `label,fid_p,fid_d` point per model.
pub fn scatter_csv(rows: &[Row]) -> String {
    let mut out = String::from("label,fid_p,fid_d\n");
    for row in rows {
        writeln!(
            out,
            "{},{},{}",
            row.label, row.report.fid_p, row.report.fid_d
        )
        .unwrap();
    }
    out
}

pub fn stats_text(report: &PerturbationReport) -> String {
    let s = &report.stats;
    let mut out = String::new();
    writeln!(out, "captions               {}", s.caption_count).unwrap();
    writeln!(out, "perturbed captions     {}", s.perturbed_caption_count).unwrap();
    writeln!(
        out,
        "caption replacement    {:.4}",
        s.caption_replacement_rate
    )
    .unwrap();
    writeln!(out, "word replacement       {:.4}", s.word_replacement_rate).unwrap();
    writeln!(
        out,
        "mean cosine similarity {:.4}",
        s.mean_cosine_similarity
    )
    .unwrap();
    writeln!(out, "substitutions per class:").unwrap();
    for c in &report.per_class {
        writeln!(
            out,
            "  {:>3} {:<10} {:<9} {}",
            c.class_id,
            c.canonical,
            c.pos.as_str(),
            c.substitutions
        )
        .unwrap();
    }
    out
}

pub fn stats_csv(report: &PerturbationReport) -> String {
    let s = &report.stats;
    format!(
        "caption_count,perturbed_caption_count,caption_replacement_rate,word_replacement_rate,mean_cosine_similarity\n\
         {},{},{},{},{}\n",
        s.caption_count,
        s.perturbed_caption_count,
        s.caption_replacement_rate,
        s.word_replacement_rate,
        s.mean_cosine_similarity
    )
}
