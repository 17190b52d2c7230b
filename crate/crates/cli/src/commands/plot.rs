use std::fmt::Write;

use crate::config::read_text;
use crate::error::{CliError, CliResult};
use crate::output::write_text;
use crate::PlotArgs;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// An SVG line chart of every numeric column against the first one.
pub fn render(csv: &str) -> Result<String, String> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or("empty table")?.split(',').collect();
    if header.len() < 2 {
        return Err("need at least two columns".into());
    }
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            l.split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| format!("non-numeric cell `{c}`")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != header.len()) {
        return Err("rows must match the header width".into());
    }
    let bounds = |vals: &mut dyn Iterator<Item = f64>| {
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) }
    };
    let (x0, x1) = bounds(&mut rows.iter().map(|r| r[0]));
    let (y0, y1) = bounds(&mut rows.iter().flat_map(|r| r[1..].to_vec()));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (l, r, b, t) = (MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, MARGIN);
    let _ = writeln!(svg, r#"<path d="M{l},{t} L{l},{b} L{r},{b}" stroke="black" fill="none"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 10.0, header[0]);
    let _ = writeln!(svg, r#"<text x="{l}" y="{}" font-size="11">{y1:.3}</text>"#, t - 5.0);
    let _ = writeln!(svg, r#"<text x="{l}" y="{}" font-size="11">{y0:.3}</text>"#, b + 15.0);
    for (col, name) in header.iter().enumerate().skip(1) {
        let color = COLORS[(col - 1) % COLORS.len()];
        let points: Vec<String> = rows.iter().map(|row| format!("{:.1},{:.1}", px(row[0]), py(row[col]))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="2"/>"#, points.join(" "));
        let _ = writeln!(svg, r#"<text x="{}" y="{}" fill="{color}">{name}</text>"#, r - 110.0, t + 18.0 * col as f64);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn run(args: PlotArgs) -> CliResult<()> {
    let text = read_text(&args.input)?;
    let svg = render(&text).map_err(|e| CliError::data(args.input.display(), e))?;
    write_text(&args.out, &svg)
}
