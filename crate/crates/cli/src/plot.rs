//! Static SVG event-study chart: one marker per event time with CI
//! whiskers, a zero line, and the reference period marked at e = -1.

use stackdid::estimator::EventStudyResult;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 20.0;
const MARGIN_B: f64 = 45.0;

pub fn event_study_svg(result: &EventStudyResult) -> String {
    let mut es: Vec<i64> = result.rows.iter().map(|r| r.e).collect();
    es.push(-1);
    es.sort_unstable();
    let (e_min, e_max) = (es[0] as f64 - 0.5, *es.last().unwrap() as f64 + 0.5);

    let mut y_min = 0.0f64;
    let mut y_max = 0.0f64;
    for r in &result.rows {
        y_min = y_min.min(r.ci_low.unwrap_or(r.estimate));
        y_max = y_max.max(r.ci_high.unwrap_or(r.estimate));
    }
    let pad = ((y_max - y_min) * 0.1).max(0.05);
    y_min -= pad;
    y_max += pad;

    let px = |e: f64| MARGIN_L + (e - e_min) / (e_max - e_min) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |v: f64| MARGIN_T + (y_max - v) / (y_max - y_min) * (HEIGHT - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        MARGIN_T,
        MARGIN_L,
        HEIGHT - MARGIN_B
    ));

    // Zero line.
    if y_min < 0.0 && y_max > 0.0 {
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
             stroke=\"#999999\" stroke-dasharray=\"4,3\"/>\n",
            MARGIN_L,
            py(0.0),
            WIDTH - MARGIN_R,
            py(0.0)
        ));
    }

    // X tick labels per event time.
    for &e in &es {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" \
             font-family=\"sans-serif\">{e}</text>\n",
            px(e as f64),
            HEIGHT - MARGIN_B + 18.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"12\" \
         font-family=\"sans-serif\">event time</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 8.0
    ));

    // Y ticks at min, 0, max.
    for v in [y_min + pad, 0.0, y_max - pad] {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"12\" \
             font-family=\"sans-serif\">{v:.2}</text>\n",
            MARGIN_L - 6.0,
            py(v) + 4.0
        ));
    }

    // Reference period: open square at zero.
    svg.push_str(&format!(
        "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"8\" height=\"8\" fill=\"white\" \
         stroke=\"#336699\" class=\"reference\"/>\n",
        px(-1.0) - 4.0,
        py(0.0) - 4.0
    ));

    // Whiskers and markers.
    for r in &result.rows {
        let x = px(r.e as f64);
        if let (Some(lo), Some(hi)) = (r.ci_low, r.ci_high) {
            svg.push_str(&format!(
                "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
                 stroke=\"#336699\" stroke-width=\"1.5\"/>\n",
                py(lo),
                py(hi)
            ));
        }
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"#336699\" class=\"estimate\"/>\n",
            py(r.estimate)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}
