//! Trajectory CSV and SVG snapshot export.

use sdp_core::cbf::SafeSetSpec;
use sdp_core::env::{forward_kinematics, EnvConfig, State};
use sdp_core::eval::StepRecord;
use std::fmt::Write as _;

pub const CSV_COLUMNS: [&str; 14] =
    ["t", "alpha1", "alpha2", "dalpha1", "dalpha2", "x_ee", "y_ee", "x_tg", "y_tg", "a1", "a2", "r", "c", "h"];

/// One row per executed step, describing the state the action was applied in.
/// `r`, `c` and `h` refer to the transition's outcome.
pub fn trajectory_csv(records: &[StepRecord], env: &EnvConfig) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS)?;
    for rec in records {
        let s = State(rec.s);
        let js = s.joint_state();
        let ee = s.end_effector(env);
        let tg = s.target();
        let row = [
            rec.t.to_string(),
            num(js.alpha1),
            num(js.alpha2),
            num(js.dalpha1),
            num(js.dalpha2),
            num(ee[0]),
            num(ee[1]),
            num(tg[0]),
            num(tg[1]),
            num(rec.a[0]),
            num(rec.a[1]),
            num(rec.r),
            rec.c.to_string(),
            num(rec.h),
        ];
        w.write_record(&row)?;
    }
    Ok(w.into_inner()?)
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

const SIZE: f64 = 400.0;
const SPAN: f64 = 1.2;

fn px(p: [f64; 2]) -> (f64, f64) {
    let scale = SIZE / (2.0 * SPAN);
    ((p[0] + SPAN) * scale, (SPAN - p[1]) * scale)
}

/// Arm links, end effector, target and the unsafe disk in workspace
/// coordinates (y up).
pub fn snapshot_svg(state: &State, env: &EnvConfig, safe: &SafeSetSpec, caption: &str) -> String {
    let js = state.joint_state();
    let elbow = [env.l1 * js.alpha1.cos(), env.l1 * js.alpha1.sin()];
    let ee = forward_kinematics(&js, env);
    let scale = SIZE / (2.0 * SPAN);
    let (o, e, f, t, c) = (px([0.0, 0.0]), px(elbow), px(ee), px(state.target()), px(safe.center));
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#).unwrap();
    writeln!(s, "  <title>{caption}</title>").unwrap();
    writeln!(s, r##"  <rect width="{SIZE}" height="{SIZE}" fill="#ffffff"/>"##).unwrap();
    writeln!(
        s,
        r##"  <circle class="unsafe" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#e8a0a0" fill-opacity="0.6" stroke="#b03030"/>"##,
        c.0,
        c.1,
        safe.radius * scale
    )
    .unwrap();
    writeln!(
        s,
        r##"  <circle class="tolerance" cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="#30a030" stroke-dasharray="4 3"/>"##,
        t.0,
        t.1,
        env.tolerance * scale
    )
    .unwrap();
    for (class, a, b) in [("link1", o, e), ("link2", e, f)] {
        writeln!(
            s,
            r##"  <line class="{class}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#303030" stroke-width="6" stroke-linecap="round"/>"##,
            a.0, a.1, b.0, b.1
        )
        .unwrap();
    }
    writeln!(s, r##"  <circle class="base" cx="{:.2}" cy="{:.2}" r="5" fill="#303030"/>"##, o.0, o.1).unwrap();
    writeln!(s, r##"  <circle class="end_effector" cx="{:.2}" cy="{:.2}" r="6" fill="#2060c0"/>"##, f.0, f.1).unwrap();
    writeln!(s, r##"  <circle class="target" cx="{:.2}" cy="{:.2}" r="6" fill="#30a030"/>"##, t.0, t.1).unwrap();
    writeln!(s, r##"  <text x="8" y="18" font-family="monospace" font-size="13">{caption}</text>"##).unwrap();
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use sdp_core::env::JointState;

    #[test]
    fn snapshot_has_every_element() {
        let s = State::encode(&JointState::new(0.3, 0.4, 0.0, 0.0), [0.5, 0.5]);
        let svg = snapshot_svg(&s, &EnvConfig::default(), &SafeSetSpec::default(), "t=0");
        for class in ["unsafe", "link1", "link2", "end_effector", "target"] {
            assert!(svg.contains(&format!("class=\"{class}\"")), "{class}");
        }
    }

    #[test]
    fn origin_maps_to_canvas_center() {
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9;
        assert!(close(px([0.0, 0.0]), (200.0, 200.0)));
        assert!(close(px([SPAN, SPAN]), (400.0, 0.0)));
    }
}
