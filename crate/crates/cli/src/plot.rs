//! PNG figure emission from persisted run records.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use plotters::style::colors::colormaps::ViridisRGB;
use vsr_pinn::lwr::GridSolution;
use vsr_pinn::trainer::{predict_grid, RunRecord};

use crate::CliError;

const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
];

/// Register a system font for the bitmap backend; text rendering silently
/// degrades if none is found.
pub fn init_fonts() {
    for path in FONT_CANDIDATES {
        if let Ok(bytes) = std::fs::read(path) {
            let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
            if plotters::style::register_font("sans-serif", FontStyle::Normal, leaked).is_ok() {
                return;
            }
        }
    }
    eprintln!("warning: no usable font found; figure labels may be missing");
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::data(format!("plotting failed: {e}"))
}

/// Recursively collect run directories (those containing metrics.json).
pub fn find_run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("metrics.json").exists() {
            out.push(dir);
            continue;
        }
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries.flatten() {
                if e.path().is_dir() {
                    stack.push(e.path());
                }
            }
        }
    }
    out.sort();
    out
}

/// Scenario label for a run directory: its parent directory name under the
/// sweep root, falling back to the directory's own name.
fn scenario_label(root: &Path, run: &Path) -> String {
    run.strip_prefix(root)
        .ok()
        .and_then(|rel| rel.components().next())
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .unwrap_or_else(|| {
            run.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
}

/// Boxplot of the mean pointwise MSE per scenario across seeds.
pub fn mse_boxplot(results_root: &Path, out_path: &Path) -> Result<(), CliError> {
    #[derive(serde::Deserialize)]
    struct M {
        mean_mse: f64,
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in find_run_dirs(results_root) {
        let metrics: M = std::fs::File::open(run.join("metrics.json"))
            .map_err(|e| CliError::data(e.to_string()))
            .and_then(|f| serde_json::from_reader(f).map_err(|e| CliError::data(e.to_string())))?;
        groups
            .entry(scenario_label(results_root, &run))
            .or_default()
            .push(metrics.mean_mse);
    }
    if groups.is_empty() {
        return Err(CliError::data(format!(
            "no run records under {}",
            results_root.display()
        )));
    }

    let labels: Vec<String> = groups.keys().cloned().collect();
    let all: Vec<f64> = groups.values().flatten().copied().collect();
    let y_max = (all.iter().cloned().fold(f64::MIN, f64::max) * 1.2 + 1e-12) as f32;

    let root = BitMapBackend::new(out_path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Pointwise MSE by scenario", ("sans-serif", 24))
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(70)
        .build_cartesian_2d(
            (0usize..labels.len().saturating_sub(1)).into_segmented(),
            0.0f32..y_max,
        )
        .map_err(plot_err)?;
    let label_for = |idx: &SegmentValue<usize>| match idx {
        SegmentValue::CenterOf(i) | SegmentValue::Exact(i) => {
            labels.get(*i).cloned().unwrap_or_default()
        }
        _ => String::new(),
    };
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_label_formatter(&label_for)
        .y_desc("mean pointwise MSE")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(groups.values().enumerate().map(|(i, vals)| {
            let q = Quartiles::new(vals);
            Boxplot::new_vertical(SegmentValue::CenterOf(i), &q)
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

fn heatmap(
    field: &ndarray::Array2<f64>,
    t_axis: &[f64],
    x_axis: &[f64],
    title: &str,
    out_path: &Path,
) -> Result<(), CliError> {
    let (lo, hi) = field.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let root = BitMapBackend::new(out_path, (820, 620)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let caption = format!("{title}  [{lo:.3}, {hi:.3}]");
    let mut chart = ChartBuilder::on(&root)
        .caption(caption, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(55)
        .build_cartesian_2d(
            x_axis[0]..*x_axis.last().unwrap(),
            t_axis[0]..*t_axis.last().unwrap(),
        )
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("x")
        .y_desc("t")
        .draw()
        .map_err(plot_err)?;
    let (nt, nx) = field.dim();
    chart
        .draw_series((0..nt.saturating_sub(1)).flat_map(|k| {
            (0..nx.saturating_sub(1)).map(move |j| (k, j))
        }).map(|(k, j)| {
            let h = (field[[k, j]] - lo) / span;
            let c = ViridisRGB::get_color(h);
            Rectangle::new(
                [(x_axis[j], t_axis[k]), (x_axis[j + 1], t_axis[k + 1])],
                c.filled(),
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

/// Reference field, baseline error, final error, first block contribution.
pub fn run_figures(run_dir: &Path, truth: &GridSolution, out_dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::data(e.to_string()))?;
    let record = RunRecord::load(run_dir).map_err(CliError::from_data_err)?;
    let model = &record.model;
    let t = &truth.t_axis;
    let x = &truth.x_axis;

    heatmap(&truth.density, t, x, "Reference density u", &out_dir.join("truth.png"))?;

    let final_stage = model.n_stacks() - 1;
    for (stage, name, title) in [
        (0usize, "error_baseline.png", "Baseline error u0 - u"),
        (final_stage, "error_final.png", "Final error un - u"),
    ] {
        match predict_grid(model, stage, truth) {
            Ok(pred) => {
                let err = &pred - &truth.density;
                heatmap(&err, t, x, title, &out_dir.join(name))?;
            }
            Err(e) => eprintln!("warning: skipping {name}: {e}"),
        }
    }

    if model.n_stacks() > 1 {
        let (nt, nx) = truth.density.dim();
        let mut field = ndarray::Array2::zeros((nt, nx));
        let mut ok = true;
        for (k, &tk) in t.iter().enumerate() {
            let ts = vec![tk; nx];
            match model.block_contribution(1, &ts, x) {
                Ok(row) => field.row_mut(k).assign(&row),
                Err(e) => {
                    eprintln!("warning: skipping block contribution: {e}");
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            heatmap(
                &field,
                t,
                x,
                "First residual block contribution",
                &out_dir.join("block1.png"),
            )?;
        }
    }
    Ok(())
}
