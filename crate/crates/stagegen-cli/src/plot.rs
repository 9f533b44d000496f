//! Loss-curve plotting: a self-contained SVG line chart of the
//! discriminator and generator adversarial losses per step. No plotting
//! dependency; the output bytes are deterministic for fixed input.

use anyhow::{bail, Context, Result};
use std::path::Path;

pub struct LossSeries {
    pub steps: Vec<f64>,
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
}

/// Parses the fixed-header loss CSV. The body must be non-empty.
pub fn parse_loss_csv(body: &str) -> Result<LossSeries> {
    let mut lines = body.lines();
    let header = lines.next().context("empty CSV: missing header")?;
    let columns: Vec<&str> = header.split(',').collect();
    let col = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .with_context(|| format!("CSV header lacks a {name:?} column"))
    };
    let (step_i, d_i, g_i) = (col("step")?, col("d_loss")?, col("g_loss_adv")?);

    let mut series = LossSeries {
        steps: Vec::new(),
        d_loss: Vec::new(),
        g_loss: Vec::new(),
    };
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |i: usize| -> Result<f64> {
            fields
                .get(i)
                .with_context(|| format!("line {}: missing column {i}", lineno + 2))?
                .parse::<f64>()
                .with_context(|| format!("line {}: not a number", lineno + 2))
        };
        series.steps.push(parse(step_i)?);
        series.d_loss.push(parse(d_i)?);
        series.g_loss.push(parse(g_i)?);
    }
    if series.steps.is_empty() {
        bail!("CSV has a header but no data rows");
    }
    Ok(series)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

fn polyline(xs: &[f64], ys: &[f64], x_range: (f64, f64), y_range: (f64, f64)) -> String {
    let (x0, x1) = x_range;
    let (y0, y1) = y_range;
    let x_span = (x1 - x0).max(1e-12);
    let y_span = (y1 - y0).max(1e-12);
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| {
            let px = MARGIN + (x - x0) / x_span * (WIDTH - 2.0 * MARGIN);
            let py = HEIGHT - MARGIN - (y - y0) / y_span * (HEIGHT - 2.0 * MARGIN);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    points.join(" ")
}

/// Renders the two loss curves as an SVG document.
pub fn render_svg(series: &LossSeries) -> String {
    let x_min = series.steps.first().copied().unwrap_or(0.0);
    let x_max = series.steps.last().copied().unwrap_or(1.0);
    let y_min = 0.0f64.min(
        series
            .d_loss
            .iter()
            .chain(&series.g_loss)
            .copied()
            .fold(f64::INFINITY, f64::min),
    );
    let y_max = series
        .d_loss
        .iter()
        .chain(&series.g_loss)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(y_min + 1e-9);

    let d_points = polyline(&series.steps, &series.d_loss, (x_min, x_max), (y_min, y_max));
    let g_points = polyline(&series.steps, &series.g_loss, (x_min, x_max), (y_min, y_max));
    let plot_left = MARGIN;
    let plot_right = WIDTH - MARGIN;
    let plot_top = MARGIN;
    let plot_bottom = HEIGHT - MARGIN;

    format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="monospace" font-size="12">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<line x1="{plot_left}" y1="{plot_bottom}" x2="{plot_right}" y2="{plot_bottom}" stroke="black"/>
<line x1="{plot_left}" y1="{plot_top}" x2="{plot_left}" y2="{plot_bottom}" stroke="black"/>
<text x="{plot_left}" y="{x_label_y}" text-anchor="middle">{x_min}</text>
<text x="{plot_right}" y="{x_label_y}" text-anchor="middle">{x_max}</text>
<text x="{y_label_x}" y="{plot_bottom}" text-anchor="end">{y_min:.3}</text>
<text x="{y_label_x}" y="{plot_top}" text-anchor="end">{y_max:.3}</text>
<text x="{WIDTH_HALF}" y="20" text-anchor="middle">loss vs step</text>
<polyline fill="none" stroke="#c0392b" stroke-width="1.5" points="{d_points}"/>
<polyline fill="none" stroke="#2980b9" stroke-width="1.5" points="{g_points}"/>
<rect x="{legend_x}" y="30" width="10" height="3" fill="#c0392b"/>
<text x="{legend_text_x}" y="36">d_loss</text>
<rect x="{legend_x}" y="46" width="10" height="3" fill="#2980b9"/>
<text x="{legend_text_x}" y="52">g_loss</text>
</svg>
"##,
        x_label_y = HEIGHT - MARGIN + 20.0,
        y_label_x = MARGIN - 6.0,
        WIDTH_HALF = WIDTH / 2.0,
        legend_x = WIDTH - MARGIN - 80.0,
        legend_text_x = WIDTH - MARGIN - 64.0,
    )
}

pub fn plot_losses(csv_path: &Path, out_path: &Path) -> Result<()> {
    let body = std::fs::read_to_string(csv_path)
        .with_context(|| format!("reading {csv_path:?}"))?;
    let series = parse_loss_csv(&body)?;
    let svg = render_svg(&series);
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {parent:?}"))?;
    }
    std::fs::write(out_path, svg).with_context(|| format!("writing {out_path:?}"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_body_is_an_error() {
        assert!(parse_loss_csv("step,epoch,d_loss,g_loss_adv,g_loss_l1,wall_ms\n").is_err());
        assert!(parse_loss_csv("").is_err());
    }

    #[test]
    fn two_rows_render_two_polylines() {
        let csv = "step,epoch,d_loss,g_loss_adv,g_loss_l1,wall_ms\n1,0,1.5,0.7,0,10\n2,0,1.2,0.8,0,20\n";
        let series = parse_loss_csv(csv).unwrap();
        let svg = render_svg(&series);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let csv = "step,epoch,d_loss,g_loss_adv,g_loss_l1,wall_ms\n5,0,0.9,1.1,0,3\n10,0,0.8,1.3,0,6\n15,0,0.7,1.0,0,9\n";
        let series = parse_loss_csv(csv).unwrap();
        assert_eq!(render_svg(&series), render_svg(&series));
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let csv = "step,epoch,d_loss,g_loss_adv,g_loss_l1,wall_ms\n1,0,not_a_number,0.7,0,10\n";
        assert!(parse_loss_csv(csv).is_err());
    }
}
