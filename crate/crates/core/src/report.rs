//! Learning-curve files and their summaries: per-iteration means with
//! confidence intervals, ANOVA across acquisitions, score histograms and an
//! SVG plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::acquisition::ImageId;
use crate::al_loop::LearningCurveRecord;
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::stats::{mean_ci, one_way_anova, score_histogram, HistogramBin};

pub const CURVES_HEADER: [&str; 10] = [
    "run_id",
    "acquisition",
    "repetition",
    "iteration",
    "n_labeled",
    "iou_background",
    "iou_crop",
    "iou_weed",
    "miou",
    "seed",
];
pub const SCORES_HEADER: [&str; 3] = ["tag", "image_id", "score"];

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub run_id: String,
    pub acquisition: String,
    pub repetition: usize,
    pub iteration: usize,
    pub n_labeled: usize,
    pub iou: [Option<f64>; 3],
    pub miou: f64,
    pub seed: u64,
}

impl CurveRow {
    pub fn from_record(run_id: &str, r: &LearningCurveRecord) -> Result<Self> {
        if r.per_class.len() != 3 {
            return Err(Error::InvalidArgument(format!(
                "curves.csv holds 3 classes, record has {}",
                r.per_class.len()
            )));
        }
        Ok(CurveRow {
            run_id: run_id.to_string(),
            acquisition: r.acquisition.to_string(),
            repetition: r.repetition,
            iteration: r.iteration,
            n_labeled: r.n_labeled,
            iou: [r.per_class[0], r.per_class[1], r.per_class[2]],
            miou: r.miou,
            seed: r.seed,
        })
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_bytes(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let bytes = csv_bytes(path, header, rows)?;
    write_atomic(path, &bytes).map_err(|e| Error::file(path, e))
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run_id.clone(),
                r.acquisition.clone(),
                r.repetition.to_string(),
                r.iteration.to_string(),
                r.n_labeled.to_string(),
                opt(r.iou[0]),
                opt(r.iou[1]),
                opt(r.iou[2]),
                r.miou.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    write_csv(path, &CURVES_HEADER, &rows)
}

fn read_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let bad = |message: String| Error::Csv {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let got = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if got.iter().ne(header.iter().copied()) {
        return Err(bad(format!(
            "schema mismatch: expected `{}`, found `{}`",
            header.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    r.records()
        .map(|rec| rec.map_err(|e| bad(e.to_string())))
        .collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    rec[i].parse().map_err(|_| Error::Csv {
        path: path.to_path_buf(),
        message: format!("bad {name} {:?}", &rec[i]),
    })
}

fn opt_field(path: &Path, rec: &csv::StringRecord, i: usize, name: &str) -> Result<Option<f64>> {
    if rec[i].is_empty() {
        Ok(None)
    } else {
        field(path, rec, i, name).map(Some)
    }
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    read_rows(path, &CURVES_HEADER)?
        .iter()
        .map(|rec| {
            Ok(CurveRow {
                run_id: rec[0].to_string(),
                acquisition: rec[1].to_string(),
                repetition: field(path, rec, 2, "repetition")?,
                iteration: field(path, rec, 3, "iteration")?,
                n_labeled: field(path, rec, 4, "n_labeled")?,
                iou: [
                    opt_field(path, rec, 5, "iou_background")?,
                    opt_field(path, rec, 6, "iou_crop")?,
                    opt_field(path, rec, 7, "iou_weed")?,
                ],
                miou: field(path, rec, 8, "miou")?,
                seed: field(path, rec, 9, "seed")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub tag: String,
    pub image_id: ImageId,
    pub score: f64,
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.tag.clone(), r.image_id.to_string(), r.score.to_string()])
        .collect();
    write_csv(path, &SCORES_HEADER, &rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    read_rows(path, &SCORES_HEADER)?
        .iter()
        .map(|rec| {
            Ok(ScoreRow {
                tag: rec[0].to_string(),
                image_id: field(path, rec, 1, "image_id")?,
                score: field(path, rec, 2, "score")?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub iteration: usize,
    pub acquisition: String,
    pub n_labeled: f64,
    pub n: usize,
    pub mean: f64,
    /// `None` with a single repetition.
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Significance {
    /// Fewer than two acquisitions, or a group with fewer than two values.
    NotTested,
    Degenerate,
    Tested { f: f64, p: f64, significant: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsRow {
    pub iteration: usize,
    pub acquisitions: Vec<String>,
    pub result: Significance,
}

/// Acquisitions in order of first appearance.
fn acquisition_order(rows: &[CurveRow]) -> Vec<String> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.acquisition) {
            order.push(r.acquisition.clone());
        }
    }
    order
}

/// mIoU values keyed by iteration then acquisition.
fn grouped(rows: &[CurveRow]) -> BTreeMap<usize, BTreeMap<String, Vec<&CurveRow>>> {
    let mut m: BTreeMap<usize, BTreeMap<String, Vec<&CurveRow>>> = BTreeMap::new();
    for r in rows {
        m.entry(r.iteration)
            .or_default()
            .entry(r.acquisition.clone())
            .or_default()
            .push(r);
    }
    m
}

pub fn summarize(rows: &[CurveRow]) -> Result<Vec<SummaryRow>> {
    let order = acquisition_order(rows);
    let mut out = Vec::new();
    for (iteration, by_acq) in grouped(rows) {
        for acq in &order {
            let Some(group) = by_acq.get(acq) else { continue };
            let values: Vec<f64> = group.iter().map(|r| r.miou).collect();
            let n_labeled = group.iter().map(|r| r.n_labeled as f64).sum::<f64>() / group.len() as f64;
            let (mean, ci) = if values.len() >= 2 {
                let ci = mean_ci(&values, 0.95)?;
                (ci.mean, Some((ci.lower, ci.upper)))
            } else {
                (values[0], None)
            };
            out.push(SummaryRow {
                iteration,
                acquisition: acq.clone(),
                n_labeled,
                n: values.len(),
                mean,
                ci,
            });
        }
    }
    Ok(out)
}

/// One-way ANOVA across acquisitions at every iteration.
pub fn iteration_anova(rows: &[CurveRow]) -> Result<Vec<StatsRow>> {
    let order = acquisition_order(rows);
    let mut out = Vec::new();
    for (iteration, by_acq) in grouped(rows) {
        let present: Vec<&String> = order.iter().filter(|a| by_acq.contains_key(*a)).collect();
        let groups: Vec<Vec<f64>> = present
            .iter()
            .map(|a| by_acq[*a].iter().map(|r| r.miou).collect())
            .collect();
        let result = if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
            Significance::NotTested
        } else {
            match one_way_anova(&groups) {
                Ok(a) => Significance::Tested {
                    f: a.f,
                    p: a.p,
                    significant: a.significant,
                },
                Err(Error::Degenerate(_)) => Significance::Degenerate,
                Err(e) => return Err(e),
            }
        };
        out.push(StatsRow {
            iteration,
            acquisitions: present.into_iter().cloned().collect(),
            result,
        });
    }
    Ok(out)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iteration.to_string(),
                r.acquisition.clone(),
                r.n_labeled.to_string(),
                r.n.to_string(),
                r.mean.to_string(),
                opt(r.ci.map(|c| c.0)),
                opt(r.ci.map(|c| c.1)),
            ]
        })
        .collect();
    write_csv(
        path,
        &["iteration", "acquisition", "n_labeled", "n", "mean", "ci_lo", "ci_hi"],
        &rows,
    )
}

/// `stats.csv`; the `acq_*` columns name the compared acquisitions.
pub fn write_stats(path: &Path, rows: &[StatsRow]) -> Result<()> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.iteration.to_string()];
            for i in 0..3 {
                v.push(r.acquisitions.get(i).cloned().unwrap_or_default());
            }
            match &r.result {
                Significance::NotTested => v.extend([String::new(), String::new(), String::new()]),
                Significance::Degenerate => {
                    v.extend([String::new(), String::new(), "degenerate".to_string()])
                }
                Significance::Tested { f, p, significant } => {
                    v.extend([f.to_string(), p.to_string(), significant.to_string()])
                }
            }
            v
        })
        .collect();
    write_csv(
        path,
        &["iteration", "acq_a", "acq_b", "acq_c", "F", "p", "significant"],
        &rows,
    )
}

/// Histogram per score tag over a shared range (default `[0, max score]`).
pub fn score_histograms(
    scores: &[ScoreRow],
    bins: usize,
    range: Option<(f64, f64)>,
) -> Result<BTreeMap<String, Vec<HistogramBin>>> {
    let range = match range {
        Some(r) => r,
        None => {
            let max = scores.iter().map(|s| s.score).fold(0.0, f64::max);
            (0.0, if max > 0.0 { max } else { 1.0 })
        }
    };
    let mut by_tag: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in scores {
        by_tag.entry(s.tag.clone()).or_default().push(s.score);
    }
    by_tag
        .into_iter()
        .map(|(tag, v)| Ok((tag, score_histogram(&v, bins, range)?)))
        .collect()
}

/// File-name-safe version of a tag.
pub fn tag_file_name(tag: &str) -> String {
    let clean: String = tag
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("hist_{clean}.csv")
}

pub fn write_histogram(path: &Path, bins: &[HistogramBin]) -> Result<()> {
    let rows: Vec<Vec<String>> = bins
        .iter()
        .map(|b| vec![b.lo.to_string(), b.hi.to_string(), b.count.to_string()])
        .collect();
    write_csv(path, &["bin_lo", "bin_hi", "count"], &rows)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean curves with shaded confidence bands and an optional dashed
/// full-pool benchmark line.
pub fn render_svg(summary: &[SummaryRow], benchmark: Option<f64>) -> String {
    let (w, h, m) = (640.0, 420.0, 50.0);
    let xs: Vec<f64> = summary.iter().map(|r| r.n_labeled).collect();
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let x_span = if x_hi > x_lo { x_hi - x_lo } else { 1.0 };
    let px = |x: f64| m + (x - x_lo) / x_span * (w - 2.0 * m);
    let py = |y: f64| h - m - y.clamp(0.0, 1.0) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for t in 0..=5 {
        let y = t as f64 / 5.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#,
            m - 6.0,
            py(y) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">labelled images</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(s, r#"<text x="12" y="{m}">mIoU</text>"#);
    if let Some(b) = benchmark {
        let _ = writeln!(
            s,
            r#"<line x1="{m}" x2="{}" y1="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="6 4"/>"#,
            w - m,
            py(b),
            py(b)
        );
    }
    let mut order: Vec<&str> = Vec::new();
    for r in summary {
        if !order.contains(&r.acquisition.as_str()) {
            order.push(&r.acquisition);
        }
    }
    for (i, acq) in order.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let rows: Vec<&SummaryRow> = summary.iter().filter(|r| r.acquisition == *acq).collect();
        let band: Vec<&SummaryRow> = rows.iter().copied().filter(|r| r.ci.is_some()).collect();
        if band.len() >= 2 {
            let mut pts: Vec<String> = band
                .iter()
                .map(|r| format!("{:.1},{:.1}", px(r.n_labeled), py(r.ci.unwrap().1)))
                .collect();
            pts.extend(
                band.iter()
                    .rev()
                    .map(|r| format!("{:.1},{:.1}", px(r.n_labeled), py(r.ci.unwrap().0))),
            );
            let _ = writeln!(
                s,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let line: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.n_labeled), py(r.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{acq}</text>"#,
            w - m - 90.0,
            m + 16.0 * (i as f64 + 1.0)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub scores: Vec<PathBuf>,
    pub bins: usize,
    pub range: Option<(f64, f64)>,
    pub plot: bool,
    pub benchmark: Option<f64>,
}

/// Paths written by [`run_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutputs {
    pub summary: PathBuf,
    pub stats: PathBuf,
    pub histograms: Vec<PathBuf>,
    pub plot: Option<PathBuf>,
}

pub fn run_report(curves: &[PathBuf], opts: &ReportOptions, out_dir: &Path) -> Result<ReportOutputs> {
    if curves.is_empty() {
        return Err(Error::InvalidArgument("need at least one curves file".into()));
    }
    let mut rows = Vec::new();
    for p in curves {
        rows.extend(read_curves(p)?);
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let summary = summarize(&rows)?;
    let summary_path = out_dir.join("summary.csv");
    write_summary(&summary_path, &summary)?;
    let stats_path = out_dir.join("stats.csv");
    write_stats(&stats_path, &iteration_anova(&rows)?)?;
    let mut histograms = Vec::new();
    if !opts.scores.is_empty() {
        let mut all = Vec::new();
        for p in &opts.scores {
            all.extend(read_scores(p)?);
        }
        for (tag, bins) in score_histograms(&all, opts.bins.max(1), opts.range)? {
            let path = out_dir.join(tag_file_name(&tag));
            write_histogram(&path, &bins)?;
            histograms.push(path);
        }
    }
    let plot = if opts.plot {
        let path = out_dir.join("curves.svg");
        write_atomic(&path, render_svg(&summary, opts.benchmark).as_bytes())
            .map_err(|e| Error::file(&path, e))?;
        Some(path)
    } else {
        None
    };
    Ok(ReportOutputs {
        summary: summary_path,
        stats: stats_path,
        histograms,
        plot,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(acq: &str, rep: usize, iteration: usize, miou: f64) -> CurveRow {
        CurveRow {
            run_id: "t".into(),
            acquisition: acq.into(),
            repetition: rep,
            iteration,
            n_labeled: 10 + 10 * iteration,
            iou: [Some(miou), None, Some(0.0)],
            miou,
            seed: 1,
        }
    }

    #[test]
    fn curves_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let rows = vec![row("BALD", 0, 0, 0.5), row("Random", 1, 2, 0.123456789)];
        write_curves(&path, &rows).unwrap();
        assert_eq!(read_curves(&path).unwrap(), rows);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("other.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(read_curves(&path), Err(Error::Csv { .. })));
    }

    #[test]
    fn anova_fixture_as_iteration_groups() {
        let mut rows = Vec::new();
        for (acq, vals) in [("BALD", [1.0, 2.0, 3.0]), ("PowerBALD", [2.0, 3.0, 4.0]), ("Random", [3.0, 4.0, 5.0])] {
            for (rep, v) in vals.into_iter().enumerate() {
                rows.push(row(acq, rep, 0, v));
            }
        }
        let stats = iteration_anova(&rows).unwrap();
        match stats[0].result {
            Significance::Tested { f, .. } => assert!((f - 3.0).abs() < 1e-9),
            ref other => panic!("{other:?}"),
        }
        assert_eq!(stats[0].acquisitions, vec!["BALD", "PowerBALD", "Random"]);
    }

    #[test]
    fn identical_repetitions_are_degenerate_with_zero_width() {
        let rows: Vec<CurveRow> = ["BALD", "Random"]
            .iter()
            .flat_map(|a| (0..3).map(move |r| row(a, r, 0, 0.4)))
            .collect();
        let s = summarize(&rows).unwrap();
        assert!(s.iter().all(|r| r.ci == Some((0.4, 0.4))));
        assert_eq!(iteration_anova(&rows).unwrap()[0].result, Significance::Degenerate);
    }

    #[test]
    fn single_acquisition_is_not_tested() {
        let dir = tempfile::tempdir().unwrap();
        let rows: Vec<CurveRow> = (0..3).map(|r| row("BALD", r, 0, 0.1 * r as f64)).collect();
        let stats = iteration_anova(&rows).unwrap();
        assert_eq!(stats[0].result, Significance::NotTested);
        let path = dir.path().join("stats.csv");
        write_stats(&path, &stats).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "0,BALD,,,,,");
        assert_eq!(summarize(&rows).unwrap().len(), 1);
    }

    #[test]
    fn histograms_share_a_range() {
        let scores = vec![
            ScoreRow { tag: "A".into(), image_id: 0, score: 0.1 },
            ScoreRow { tag: "B".into(), image_id: 1, score: 1.0 },
            ScoreRow { tag: "B".into(), image_id: 2, score: 0.9 },
        ];
        let h = score_histograms(&scores, 2, None).unwrap();
        assert_eq!(h["A"].iter().map(|b| b.count).collect::<Vec<_>>(), vec![1, 0]);
        assert_eq!(h["B"].iter().map(|b| b.count).collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(tag_file_name("BALD rep/0"), "hist_BALD_rep_0.csv");
    }

    #[test]
    fn svg_has_bands_and_benchmark() {
        let rows: Vec<CurveRow> = (0..2)
            .flat_map(|it| (0..3).map(move |r| row("BALD", r, it, 0.3 + 0.1 * r as f64 + 0.1 * it as f64)))
            .collect();
        let svg = render_svg(&summarize(&rows).unwrap(), Some(0.87));
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<polygon"));
        assert!(svg.contains("stroke-dasharray"));
    }
}
