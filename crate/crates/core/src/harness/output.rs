use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::census::{class_counts, CensusRecord};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

/// One JSON document per line, each terminated by `\n`.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    write_text(path, &to_jsonl(records))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// `class,k,count` over classified runs; `k` is empty when not applicable.
pub fn summary_csv(records: &[CensusRecord]) -> String {
    let mut out = String::from("class,k,count\n");
    for ((class, k), count) in class_counts(records) {
        let k = k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(out, "{class},{k},{count}").unwrap();
    }
    out
}

const SIZE: f64 = 800.0;
const RADIUS: f64 = 360.0;

fn project(x: f64, y: f64) -> (f64, f64) {
    (SIZE / 2.0 + RADIUS * x, SIZE / 2.0 - RADIUS * y)
}

/// Orthographic view of a `d = 3` trajectory along the third axis: the unit
/// circle outline, one polyline per token and a circle at each endpoint.
pub fn trajectory_svg(traj: &Trajectory) -> Result<String> {
    let last = traj.final_state();
    if last.d() != 3 {
        return Err(Error::contract(format!("SVG output needs d = 3, got d = {}", last.d())));
    }
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" width="{SIZE}" height="{SIZE}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{SIZE}" height="{SIZE}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<circle class="sphere" cx="{c}" cy="{c}" r="{RADIUS}" fill="none" stroke="black" stroke-width="1.5"/>"#,
        c = SIZE / 2.0
    )
    .unwrap();
    for i in 0..last.n() {
        let hue = 360.0 * i as f64 / last.n() as f64;
        let points: Vec<String> = traj
            .states
            .iter()
            .map(|s| {
                let (px, py) = project(s.tokens()[(0, i)], s.tokens()[(1, i)]);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        writeln!(
            out,
            r#"<polyline class="trajectory" points="{}" fill="none" stroke="hsl({hue:.0},70%,45%)" stroke-width="1.2"/>"#,
            points.join(" ")
        )
        .unwrap();
    }
    for i in 0..last.n() {
        let hue = 360.0 * i as f64 / last.n() as f64;
        let (px, py) = project(last.tokens()[(0, i)], last.tokens()[(1, i)]);
        writeln!(
            out,
            r#"<circle class="endpoint" cx="{px:.2}" cy="{py:.2}" r="5" fill="hsl({hue:.0},70%,45%)"/>"#
        )
        .unwrap();
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{integrate, IntegrationOptions, System};
    use crate::harness::census::run_census;
    use crate::harness::instance::random_instance;
    use crate::harness::spec::ExperimentSpec;
    use crate::SphereConfiguration;

    #[test]
    fn jsonl_round_trip() {
        let spec = ExperimentSpec {
            instances: 2,
            runs_per_instance: 3,
            n: 5,
            ..Default::default()
        };
        let recs = run_census(&spec).unwrap();
        let text = to_jsonl(&recs);
        assert_eq!(text.lines().count(), 6);
        let back: Vec<CensusRecord> = parse_jsonl(&text).unwrap();
        assert_eq!(back, recs);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.jsonl");
        write_jsonl(&path, &recs).unwrap();
        let back: Vec<CensusRecord> = read_jsonl(&path).unwrap();
        assert_eq!(back, recs);
        assert!(matches!(
            read_jsonl::<CensusRecord>(&dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn csv_totals() {
        let spec = ExperimentSpec {
            instances: 2,
            runs_per_instance: 4,
            n: 5,
            ..Default::default()
        };
        let recs = run_census(&spec).unwrap();
        let csv = summary_csv(&recs);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("class,k,count"));
        let total: usize = lines.map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(total, recs.iter().filter(|r| r.is_classified()).count());
    }

    #[test]
    fn svg_has_one_endpoint_per_token() {
        let p = random_instance(3, 0.0, 4).unwrap();
        let x0 = crate::geometry::sample_uniform_sphere(3, 7, 5).unwrap();
        let t = integrate(&x0, System::SelfAttention, &p, &IntegrationOptions::default()).unwrap();
        assert!(t.converged());
        let svg = trajectory_svg(&t).unwrap();
        assert!(svg.contains(r#"viewBox="0 0 800 800""#));
        assert_eq!(svg.matches(r#"class="endpoint""#).count(), 7);
        assert_eq!(svg.matches("<polyline").count(), 7);

        let x4 = SphereConfiguration::from_stacked(4, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let p4 = random_instance(4, 0.0, 1).unwrap();
        let t4 = integrate(&x4, System::Oja, &p4, &IntegrationOptions::default()).unwrap();
        assert!(trajectory_svg(&t4).is_err());
    }
}
