//! Per-lead-time metric curves as standalone SVG files.
//!
//! Figures are outputs, not an interactive surface: one polyline per
//! variable over lead time, plus a sidecar CSV holding exactly the plotted
//! series.

use std::path::Path;

use crate::error::{HarnessError, Result};
use crate::pipeline::write_atomic;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub variable: String,
    pub points: Vec<(f64, f64)>,
}

/// Pull one metric column out of a metrics CSV, grouped by variable.
pub fn series_from_metrics_csv(csv: &str, metric: &str) -> Result<Vec<Series>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::validation("empty metrics CSV"))?;
    let columns: Vec<&str> = header.split(',').collect();
    let metric_idx = columns
        .iter()
        .position(|c| *c == metric)
        .ok_or_else(|| {
            HarnessError::validation(format!(
                "metric '{metric}' not in columns {columns:?}"
            ))
        })?;
    let lead_idx = columns
        .iter()
        .position(|c| *c == "lead_time_h")
        .ok_or_else(|| HarnessError::validation("metrics CSV lacks lead_time_h"))?;
    let mut series: Vec<Series> = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(HarnessError::validation(format!(
                "malformed metrics row: {line}"
            )));
        }
        let value = fields[metric_idx];
        if value.is_empty() {
            continue; // absent entry (e.g. SSR of a deterministic forecast)
        }
        let value: f64 = value
            .parse()
            .map_err(|_| HarnessError::validation(format!("bad value {value}")))?;
        let lead: f64 = fields[lead_idx]
            .parse()
            .map_err(|_| HarnessError::validation(format!("bad lead {}", fields[lead_idx])))?;
        let var = fields[0].to_string();
        match series.iter_mut().find(|s| s.variable == var) {
            Some(s) => s.points.push((lead, value)),
            None => series.push(Series {
                variable: var,
                points: vec![(lead, value)],
            }),
        }
    }
    if series.is_empty() {
        return Err(HarnessError::validation(format!(
            "no finite '{metric}' values to plot"
        )));
    }
    Ok(series)
}

/// Render the series as an SVG curve panel and write it together with the
/// sidecar CSV (same stem, `.csv` extension).
pub fn write_metric_plot(
    svg_path: &Path,
    metric: &str,
    series: &[Series],
) -> Result<()> {
    let (width, height) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (62.0, 16.0, 34.0, 46.0);
    let (pw, ph) = (width - ml - mr, height - mt - mb);

    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            xmin = xmin.min(x);
            xmax = xmax.max(x);
            ymin = ymin.min(y);
            ymax = ymax.max(y);
        }
    }
    if !(xmin < xmax) {
        xmax = xmin + 1.0;
    }
    ymin = ymin.min(0.0);
    if !(ymin < ymax) {
        ymax = ymin + 1.0;
    }
    let pad = 0.05 * (ymax - ymin);
    let (ymin, ymax) = (ymin, ymax + pad);
    let sx = |x: f64| ml + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| mt + ph - (y - ymin) / (ymax - ymin) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"20\" font-family=\"sans-serif\" font-size=\"15\" \
         text-anchor=\"middle\">{metric} vs lead time</text>\n",
        width / 2.0
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph,
        ml + pw,
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + ph
    ));
    // Ticks: five per axis.
    for i in 0..=4 {
        let fx = xmin + (xmax - xmin) * i as f64 / 4.0;
        let fy = ymin + (ymax - ymin) * i as f64 / 4.0;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\n\
             <text x=\"{0}\" y=\"{3}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{4:.3}</text>\n",
            sx(fx),
            mt + ph,
            mt + ph + 5.0,
            mt + ph + 20.0,
            fx
        ));
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{3}\" y=\"{4}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"end\">{5:.4}</text>\n",
            ml - 5.0,
            sy(fy),
            ml,
            ml - 8.0,
            sy(fy) + 4.0,
            fy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" \
         text-anchor=\"middle\">lead time (h)</text>\n",
        ml + pw / 2.0,
        height - 8.0
    ));
    // Curves and legend.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
            pts.join(" ")
        ));
        let ly = mt + 14.0 + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n\
             <text x=\"{2}\" y=\"{3}\" font-family=\"sans-serif\" font-size=\"11\">{4}</text>\n",
            ml + pw - 110.0,
            ml + pw - 86.0,
            ml + pw - 80.0,
            ly + 4.0,
            s.variable
        ));
    }
    svg.push_str("</svg>\n");
    write_atomic(svg_path, svg.as_bytes())?;

    let mut sidecar = String::from("variable,lead_time_h,value\n");
    for s in series {
        for &(x, y) in &s.points {
            sidecar.push_str(&format!("{},{x},{y}\n", s.variable));
        }
    }
    write_atomic(&svg_path.with_extension("csv"), sidecar.as_bytes())?;
    Ok(())
}
