//! Static SVG rendering of storyboard strips: one panel per step, goals
//! as outlined squares, agents as filled circles (open once parked),
//! red panel borders where the attack flipped at least one action.

use std::fmt::Write;

use rmapf_core::env::InstanceDoc;
use rmapf_core::eval::PolicyStrip;

const CELL: usize = 14;
const PAD: usize = 10;

const AGENT_COLORS: [&str; 8] =
    ["#2171b5", "#cb181d", "#238b45", "#f08c00", "#6a51a3", "#ce1256", "#006d77", "#8c510a"];

/// Renders one policy's strip over the shared instance.
pub fn storyboard_svg(instance: &InstanceDoc, strip: &PolicyStrip) -> String {
    let side = instance.side;
    let panel = side * CELL;
    let n_panels = strip.steps.len() + 1; // final state appended
    let width = PAD + n_panels * (panel + PAD);
    let height = panel + 2 * PAD + 16;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"9\">\n"
    );
    let _ = writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"12\">{} | success {:.2} | flips {}</text>",
        xml_escape(&strip.label),
        strip.success,
        strip.flip_count
    );

    for (i, step) in strip.steps.iter().enumerate() {
        let x0 = PAD + i * (panel + PAD);
        let flipped = step.flips.iter().any(|&f| f);
        draw_panel(&mut svg, instance, x0, PAD + 16, flipped);
        for (a, pos) in step.positions.iter().enumerate() {
            draw_agent(&mut svg, x0, PAD + 16, *pos, a, step.reached[a]);
        }
    }
    // Final state panel.
    let x0 = PAD + strip.steps.len() * (panel + PAD);
    draw_panel(&mut svg, instance, x0, PAD + 16, false);
    for (a, pos) in strip.final_positions.iter().enumerate() {
        draw_agent(&mut svg, x0, PAD + 16, *pos, a, strip.final_reached[a]);
    }

    svg.push_str("</svg>\n");
    svg
}

fn draw_panel(svg: &mut String, instance: &InstanceDoc, x0: usize, y0: usize, flipped: bool) {
    let side = instance.side;
    let panel = side * CELL;
    let border = if flipped { "#cb181d" } else { "#bbbbbb" };
    let _ = writeln!(
        svg,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{panel}\" height=\"{panel}\" fill=\"#ffffff\" \
         stroke=\"{border}\" stroke-width=\"2\"/>"
    );
    for cell in &instance.obstacles {
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#555555\"/>",
            x0 + cell[1] * CELL,
            y0 + cell[0] * CELL
        );
    }
    for (a, goal) in instance.goals.iter().enumerate() {
        let color = AGENT_COLORS[a % AGENT_COLORS.len()];
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>",
            x0 + goal[1] * CELL + 2,
            y0 + goal[0] * CELL + 2,
            CELL - 4,
            CELL - 4
        );
    }
}

fn draw_agent(
    svg: &mut String,
    x0: usize,
    y0: usize,
    pos: [usize; 2],
    idx: usize,
    reached: bool,
) {
    let color = AGENT_COLORS[idx % AGENT_COLORS.len()];
    let cx = x0 + pos[1] * CELL + CELL / 2;
    let cy = y0 + pos[0] * CELL + CELL / 2;
    let fill = if reached { "#ffffff" } else { color };
    let _ = writeln!(
        svg,
        "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"{}\" fill=\"{fill}\" stroke=\"{color}\" \
         stroke-width=\"1.5\"/>",
        CELL / 2 - 2
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" fill=\"{}\" text-anchor=\"middle\">{idx}</text>",
        cx,
        cy + 3,
        if reached { color } else { "#ffffff" }
    );
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
