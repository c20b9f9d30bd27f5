//! Static SVG plots drawn from the metrics CSVs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dhn_core::Error;
use plotters::prelude::*;

type Series = Vec<(String, Vec<(f64, f64)>)>;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, Error> {
        let fail = |e: csv::Error| Error::format(format!("{}: {e}", path.display()));
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(fail)?;
        let header = r.headers().map_err(fail)?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn numbers(&self, name: &str) -> Result<Vec<f64>, Error> {
        let i = self.col(name).ok_or_else(|| Error::format(format!("missing column {name}")))?;
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().map_err(|_| Error::format(format!("bad number `{}`", r[i]))))
            .collect()
    }

    fn strings(&self, name: &str) -> Result<Vec<String>, Error> {
        let i = self.col(name).ok_or_else(|| Error::format(format!("missing column {name}")))?;
        Ok(self.rows.iter().map(|r| r[i].clone()).collect())
    }
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::format(format!("plot: {e}"))
}

/// Draws `series` over numeric x, optionally with category labels for
/// integer ticks and a log-scaled y axis.
fn chart(path: &Path, notes: &[String], title: &str, x_label: &str, y_label: &str, series: &Series, ticks: Option<&[String]>, log_y: bool) -> Result<(), Error> {
    let pts = series.iter().flat_map(|(_, p)| p.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        if log_y && y <= 0.0 {
            continue;
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x0.is_finite() && y0.is_finite()) {
        return Ok(());
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if ticks.is_some() {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 <= y0 {
        y1 = if log_y { y0 * 10.0 } else { y0 + 1.0 };
    }
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_error)?;
    let mut builder = ChartBuilder::on(&root);
    builder
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(80);
    let labels = |x: &f64| match ticks {
        Some(t) if (x.round() - x).abs() < 1e-9 && *x >= 0.0 => t.get(*x as usize).cloned().unwrap_or_default(),
        Some(_) => String::new(),
        None => format!("{x}"),
    };
    macro_rules! draw {
        ($chart:expr) => {{
            let mut c = $chart;
            let mut mesh = c.configure_mesh();
            mesh.x_desc(x_label).y_desc(y_label).x_label_formatter(&labels);
            if let Some(t) = ticks {
                mesh.x_labels(t.len() + 2);
            }
            mesh.draw().map_err(plot_error)?;
            for (i, (name, p)) in series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let p: Vec<(f64, f64)> = p
                    .iter()
                    .copied()
                    .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
                    .collect();
                c.draw_series(LineSeries::new(p.clone(), color.stroke_width(2)))
                    .map_err(plot_error)?
                    .label(name.as_str())
                    .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
                if ticks.is_some() {
                    c.draw_series(p.iter().map(|&xy| Circle::new(xy, 4, color.filled())))
                        .map_err(plot_error)?;
                }
            }
            c.configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_error)?;
        }};
    }
    if log_y {
        draw!(builder.build_cartesian_2d(x0..x1, (y0..y1).log_scale()).map_err(plot_error)?);
    } else {
        draw!(builder.build_cartesian_2d(x0..x1, y0..y1).map_err(plot_error)?);
    }
    root.present().map_err(plot_error)?;
    drop(root);
    stamp(path, notes)
}

/// Inserts `notes` as an XML comment after the opening `<svg>` tag.
fn stamp(path: &Path, notes: &[String]) -> Result<(), Error> {
    let svg = std::fs::read_to_string(path)?;
    let at = svg.find("<svg").and_then(|i| svg[i..].find('>').map(|j| i + j + 1)).unwrap_or(0);
    let comment = format!("\n<!-- {} -->", notes.join("; ").replace("--", "- -"));
    std::fs::write(path, format!("{}{comment}{}", &svg[..at], &svg[at..]))?;
    Ok(())
}

fn seed_mean(values: impl IntoIterator<Item = (String, f64)>) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (k, v) in values {
        let e = acc.entry(k).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// `rollout_single_dhn-b2s1_seed0` splits into task, system, model, seed.
fn step_file_key(stem: &str) -> Option<(String, String, String, String)> {
    let (head, seed) = stem.rsplit_once("_seed")?;
    let mut parts = head.splitn(3, '_');
    Some((parts.next()?.into(), parts.next()?.into(), parts.next()?.into(), seed.into()))
}

/// Renders every plot the CSVs in `dir` support and returns the SVG paths.
pub fn render_dir(dir: &Path, notes: &[String]) -> Result<Vec<PathBuf>, Error> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut csvs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    csvs.sort();
    let mut out = Vec::new();
    let mut steps: BTreeMap<(String, String, String), Series> = BTreeMap::new();
    let mut energy: BTreeMap<(String, String, String), Series> = BTreeMap::new();
    for path in &csvs {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let table = Table::read(path)?;
        if table.col("step").is_some() && table.col("abs_energy_error").is_some() {
            let Some((task, system, model, seed)) = step_file_key(&stem) else { continue };
            let x = table.numbers("step")?;
            let key = (task, system, seed);
            let zip = |ys: Vec<f64>| x.iter().copied().zip(ys).collect::<Vec<_>>();
            steps.entry(key.clone()).or_default().push((model.clone(), zip(table.numbers("state_mse")?)));
            energy.entry(key).or_default().push((model, zip(table.numbers("abs_energy_error")?)));
        } else if table.col("epoch").is_some() {
            let x = table.numbers("epoch")?;
            let series = vec![
                ("monitor loss".to_string(), x.iter().copied().zip(table.numbers("loss")?).collect()),
                ("train loss".to_string(), x.iter().copied().zip(table.numbers("train_loss")?).collect()),
            ];
            let svg = dir.join(format!("{stem}.svg"));
            chart(&svg, notes, &stem, "epoch", "loss", &series, None, true)?;
            out.push(svg);
        } else if stem.starts_with("probe_") {
            let models = table.strings("model")?;
            let geos = table.strings("geometry")?;
            let mse = table.numbers("mse")?;
            let dhn = seed_mean(
                models.iter().zip(&geos).zip(&mse).filter(|((m, _), _)| *m == "dhn").map(|((_, g), v)| (g.clone(), *v)),
            );
            let ticks: Vec<String> = dhn.keys().cloned().collect();
            let mut series: Series = vec![("dhn".into(), dhn.values().enumerate().map(|(i, v)| (i as f64, *v)).collect())];
            let others = seed_mean(models.iter().zip(&mse).filter(|(m, _)| *m != "dhn").map(|(m, v)| (m.clone(), *v)));
            let last = ticks.len().saturating_sub(1) as f64;
            for (m, v) in others {
                series.push((m, vec![(0.0, v), (last, v)]));
            }
            let svg = dir.join(format!("{stem}.svg"));
            chart(&svg, notes, &stem, "geometry", "probe MSE (seed mean)", &series, Some(&ticks), false)?;
            out.push(svg);
        } else if stem.starts_with("superres_") {
            let models = table.strings("model")?;
            let segs = table.strings("segment")?;
            let mse = table.numbers("mse")?;
            let ticks = vec!["seen".to_string(), "unseen".to_string()];
            let means = seed_mean(models.iter().zip(&segs).zip(&mse).map(|((m, s), v)| (format!("{m}\t{s}"), *v)));
            let mut by_model: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
            for (k, v) in means {
                let (m, s) = k.split_once('\t').expect("joined above");
                let x = ticks.iter().position(|t| t == s).unwrap_or(0) as f64;
                by_model.entry(m.to_string()).or_default().push((x, v));
            }
            let series: Series = by_model.into_iter().collect();
            let svg = dir.join(format!("{stem}.svg"));
            chart(&svg, notes, &stem, "segment", "MSE (seed mean)", &series, Some(&ticks), true)?;
            out.push(svg);
        }
    }
    for (map, what, label) in [(&steps, "mse", "state MSE"), (&energy, "energy", "relative energy error")] {
        for ((task, system, seed), series) in map {
            let name = format!("{task}_{system}_seed{seed}_{what}");
            let svg = dir.join(format!("{name}.svg"));
            chart(&svg, notes, &name, "step", label, series, None, true)?;
            out.push(svg);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_files_split_into_keys() {
        assert_eq!(
            step_file_key("complete_double_hnn-euler_seed12"),
            Some(("complete".into(), "double".into(), "hnn-euler".into(), "12".into()))
        );
        assert_eq!(step_file_key("probe_double"), None);
    }

    #[test]
    fn renders_step_and_probe_charts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("rollout_single_dhn-b2s1_seed0.csv"),
            "# task rollout\nstep,state_mse,q_mse,energy_error,abs_energy_error\n8,1e-3,1e-3,0.01,0.01\n9,2e-3,1e-3,-0.02,0.02\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("probe_double.csv"),
            "model,geometry,seed,target,mse,train_mse,rank\ndhn,b2s1,0,l2/l1,0.5,0.4,8\ndhn,b4s2,0,l2/l1,0.3,0.2,8\nvanilla,-,0,l2/l1,0.7,0.6,8\n",
        )
        .unwrap();
        let files = render_dir(dir.path(), &["config_hash abc".into()]).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into()).collect();
        assert_eq!(names, ["probe_double.svg", "rollout_single_seed0_mse.svg", "rollout_single_seed0_energy.svg"]);
        for f in files {
            let svg = std::fs::read_to_string(f).unwrap();
            assert!(svg.starts_with("<svg"));
            assert!(svg.contains("<!-- config_hash abc -->"));
        }
    }
}
