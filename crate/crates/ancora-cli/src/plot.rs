//! Minimal static SVG emitters. No styling dependencies; every chart
//! is a self-contained file a browser can open.

use std::path::Path;

use ancora::error::{Error, Result};

const W: f64 = 720.0;
const H: f64 = 440.0;
const ML: f64 = 60.0;
const MR: f64 = 20.0;
const MT: f64 = 34.0;
const MB: f64 = 46.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Nice round tick step covering `span` in roughly `n` intervals.
fn tick_step(span: f64, n: usize) -> f64 {
    let raw = span / n.max(1) as f64;
    let mag = 10f64.powf(raw.abs().log10().floor());
    let norm = raw / mag;
    let snapped = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    snapped * mag
}

fn fmt_tick(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e6 {
        format!("{}", v as i64)
    } else {
        format!("{v:.3}")
    }
}

/// Loss curves from a step-log JSONL file. Series: total, the
/// cross-alignment term, and the knowledge-grounding term.
pub fn loss_curve_from_log(log_path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(log_path).map_err(|e| Error::io(log_path, e))?;
    let mut rows: Vec<(f64, f64, f64, f64)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::data(format!("{}:{}: bad log line: {e}", log_path.display(), lineno + 1))
        })?;
        let f = |k: &str| -> Result<f64> {
            v.get(k).and_then(serde_json::Value::as_f64).ok_or_else(|| {
                Error::data(format!(
                    "{}:{}: log line lacks numeric '{k}'",
                    log_path.display(),
                    lineno + 1
                ))
            })
        };
        rows.push((f("step")?, f("l_total")?, f("l_ca")?, f("l_cg")?));
    }
    if rows.is_empty() {
        return Ok(format!(
            "{}<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">no steps logged</text>\n</svg>\n",
            header("training loss"),
            W / 2.0,
            H / 2.0
        ));
    }

    let x0 = rows.first().expect("nonempty").0;
    let x1 = rows.last().expect("nonempty").0.max(x0 + 1.0);
    let y1 = rows
        .iter()
        .flat_map(|r| [r.1, r.2, r.3])
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;

    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y / y1) * (H - MT - MB);

    let mut svg = header("training loss");
    // gridlines and axis labels
    let ys = tick_step(y1, 5);
    let mut t = 0.0;
    while t <= y1 {
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#ddd\"/>\n\
             <text x=\"{2}\" y=\"{3}\" text-anchor=\"end\">{4}</text>\n",
            py(t),
            W - MR,
            ML - 6.0,
            py(t) + 4.0,
            fmt_tick(t)
        ));
        t += ys;
    }
    let xs = tick_step(x1 - x0, 6);
    let mut t = (x0 / xs).ceil() * xs;
    while t <= x1 {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            px(t),
            H - MB + 18.0,
            fmt_tick(t)
        ));
        t += xs;
    }
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <text x=\"{2}\" y=\"{3}\" text-anchor=\"middle\">step</text>\n",
        H - MB,
        W - MR,
        (ML + W - MR) / 2.0,
        H - 8.0
    ));

    let series: [(&str, &str, fn(&(f64, f64, f64, f64)) -> f64); 3] = [
        ("total", "#1f77b4", |r| r.1),
        ("cross-alignment", "#d62728", |r| r.2),
        ("knowledge-grounding", "#2ca02c", |r| r.3),
    ];
    for (i, (name, color, pick)) in series.iter().enumerate() {
        let pts: String = rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.0), py(pick(r))))
            .collect::<Vec<_>>()
            .join(" ");
        svg.push_str(&format!(
            "<polyline points=\"{pts}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n"
        ));
        let lx = ML + 12.0 + i as f64 * 180.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"{color}\" stroke-width=\"3\"/>\n\
             <text x=\"{2}\" y=\"{3}\">{name}</text>\n",
            MT + 6.0,
            lx + 18.0,
            lx + 24.0,
            MT + 10.0,
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Bar chart of a [0, 1] metric per labeled cell; `None` marks a
/// failed cell.
pub fn metric_bars(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let mut svg = header(title);
    let n = bars.len().max(1) as f64;
    let span = W - ML - MR;
    let slot = span / n;
    let bw = (slot * 0.6).min(90.0);
    let py = |y: f64| H - MB - y.clamp(0.0, 1.0) * (H - MT - MB);

    for k in 0..=5 {
        let v = k as f64 / 5.0;
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#ddd\"/>\n\
             <text x=\"{2}\" y=\"{3}\" text-anchor=\"end\">{v:.1}</text>\n",
            py(v),
            W - MR,
            ML - 6.0,
            py(v) + 4.0
        ));
    }
    for (i, (label, value)) in bars.iter().enumerate() {
        let cx = ML + slot * (i as f64 + 0.5);
        match value {
            Some(v) => {
                svg.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" \
                     fill=\"#1f77b4\"/>\n\
                     <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{v:.3}</text>\n",
                    cx - bw / 2.0,
                    py(*v),
                    (H - MB - py(*v)).max(0.0),
                    py(*v) - 6.0,
                ));
            }
            None => {
                svg.push_str(&format!(
                    "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{bw:.2}\" height=\"{:.2}\" \
                     fill=\"none\" stroke=\"#999\" stroke-dasharray=\"4 3\"/>\n\
                     <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#999\">failed</text>\n",
                    cx - bw / 2.0,
                    py(1.0),
                    H - MB - py(1.0),
                    (py(0.0) + py(1.0)) / 2.0,
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            escape(label)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n</svg>\n",
        H - MB,
        W - MR
    ));
    svg
}
