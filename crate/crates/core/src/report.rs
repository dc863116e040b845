//! Run-directory artifacts and static report generation.
//!
//! A run directory accumulates `config.json` + `curve.json` + `checkpoint.json`
//! from training and `metrics.json` + `pr.json` + `samples.json` from
//! evaluation. `generate_report` consumes one or more run directories and
//! writes a combined JSON table (carrying every config field for provenance)
//! plus static PNG plots per run: loss curves, consistency-ratio-vs-step,
//! precision-recall curves, and GT-vs-prediction map overlays. Regenerating
//! from unchanged inputs reproduces every output byte for byte.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CoreError, Result};
use crate::geometry::{GridSpec, MapInstance};
use crate::metrics::{MetricsReport, ScoredInstance};
use crate::train::LossPoint;

pub const CONFIG_FILE: &str = "config.json";
pub const CURVE_FILE: &str = "curve.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PR_FILE: &str = "pr.json";
pub const SAMPLES_FILE: &str = "samples.json";

/// Chamfer threshold (meters) at which evaluation exports PR curves.
pub const PR_EXPORT_THRESHOLD_M: f64 = 1.0;

/// How many evaluation samples are dumped for overlay rendering.
pub const OVERLAY_SAMPLES: usize = 4;

/// Minimum score for a prediction to appear in an overlay image.
pub const OVERLAY_SCORE_MIN: f64 = 0.3;

/// GT instances plus the predictions decoded for the same scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleDump {
    pub gt: Vec<MapInstance>,
    pub preds: Vec<ScoredInstance>,
}

/// Everything report generation needs from one run directory.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub id: String,
    pub config: RunConfig,
    pub curve: Vec<LossPoint>,
    pub metrics: MetricsReport,
    pub pr: BTreeMap<String, Vec<[f64; 2]>>,
    pub samples: Vec<SampleDump>,
}

/// Serializes as pretty JSON with a trailing newline (stable byte output).
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a JSON artifact; a missing file reports the full path.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CoreError::MissingRun(path.display().to_string())
        } else {
            CoreError::Io(e)
        }
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads the artifacts of one run directory, erroring with the offending
/// path when any required file is absent.
pub fn load_run(dir: &Path) -> Result<RunRecord> {
    if !dir.is_dir() {
        return Err(CoreError::MissingRun(dir.display().to_string()));
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(RunRecord {
        id,
        config: load_json(&dir.join(CONFIG_FILE))?,
        curve: load_json(&dir.join(CURVE_FILE))?,
        metrics: load_json(&dir.join(METRICS_FILE))?,
        pr: load_json(&dir.join(PR_FILE))?,
        samples: load_json(&dir.join(SAMPLES_FILE))?,
    })
}

/// One row of the combined table; the full config rides along so every knob
/// that produced the numbers is recorded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub id: String,
    pub config: RunConfig,
    pub steps_logged: usize,
    pub final_loss: Option<f64>,
    pub final_util: Option<f64>,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportTable {
    pub runs: Vec<RunSummary>,
    /// metric -> run id -> value, for quick side-by-side comparison.
    pub comparison: BTreeMap<String, BTreeMap<String, f64>>,
}

pub fn build_table(records: &[RunRecord]) -> ReportTable {
    let mut comparison: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut add = |metric: &str, id: &str, v: f64| {
        comparison
            .entry(metric.to_string())
            .or_default()
            .insert(id.to_string(), v);
    };
    let mut runs = Vec::with_capacity(records.len());
    for r in records {
        add("map_chamfer", &r.id, r.metrics.map_chamfer);
        add("map_raster", &r.id, r.metrics.map_raster);
        add("util", &r.id, r.metrics.util);
        if let Some(p) = r.curve.last() {
            add("final_loss", &r.id, p.total);
        }
        runs.push(RunSummary {
            id: r.id.clone(),
            config: r.config.clone(),
            steps_logged: r.curve.len(),
            final_loss: r.curve.last().map(|p| p.total),
            final_util: r.curve.last().and_then(|p| p.util),
            metrics: r.metrics.clone(),
        });
    }
    ReportTable { runs, comparison }
}

#[derive(Debug, Clone)]
pub struct ReportPaths {
    pub table: PathBuf,
    pub images: Vec<PathBuf>,
}

/// Reads every run directory, writes `report.json` plus the per-run plots
/// into `out_dir`, and returns the paths written.
pub fn generate_report(run_dirs: &[PathBuf], out_dir: &Path) -> Result<ReportPaths> {
    let mut records = Vec::with_capacity(run_dirs.len());
    for dir in run_dirs {
        records.push(load_run(dir)?);
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &records {
        if !seen.insert(r.id.clone()) {
            return Err(CoreError::InvalidConfig(format!(
                "duplicate run id '{}': run directories must have distinct names",
                r.id
            )));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let table_path = out_dir.join("report.json");
    save_json(&table_path, &build_table(&records))?;
    let mut images = Vec::new();
    for r in &records {
        let mut emit = |suffix: &str, img: RgbImage| -> Result<()> {
            let path = out_dir.join(format!("{}_{suffix}.png", r.id));
            img.save(&path).map_err(|e| {
                CoreError::InvalidConfig(format!("failed to encode {}: {e}", path.display()))
            })?;
            images.push(path);
            Ok(())
        };
        emit("loss", loss_plot(&r.curve))?;
        emit("util", util_plot(&r.curve))?;
        emit("pr", pr_plot(&r.pr))?;
        emit("maps", overlay_image(&r.samples, &r.config.grid))?;
    }
    Ok(ReportPaths {
        table: table_path,
        images,
    })
}

// ---------------------------------------------------------------------------
// Plot primitives. Everything below is pure pixel pushing: fixed palette,
// fixed canvas sizes, no clocks or randomness, so regenerated images are
// byte-identical.
// ---------------------------------------------------------------------------

const PLOT_W: u32 = 640;
const PLOT_H: u32 = 480;
const MARGIN: u32 = 48;
const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID_GRAY: Rgb<u8> = Rgb([220, 220, 220]);

pub const PALETTE: [Rgb<u8>; 5] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
];

fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], color: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize) * 2 + 1;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a[0] + t * (b[0] - a[0]);
        let y = a[1] + t * (b[1] - a[1]);
        let (xi, yi) = (x.round() as i64, y.round() as i64);
        if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
            img.put_pixel(xi as u32, yi as u32, color);
        }
    }
}

fn draw_dot(img: &mut RgbImage, p: [f64; 2], color: Rgb<u8>) {
    for dy in -1i64..=1 {
        for dx in -1i64..=1 {
            let (xi, yi) = (p[0].round() as i64 + dx, p[1].round() as i64 + dy);
            if xi >= 0 && yi >= 0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
                img.put_pixel(xi as u32, yi as u32, color);
            }
        }
    }
}

/// A framed chart mapping data coordinates into the margin box; y grows up.
struct Chart {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Chart {
    fn new(x: (f64, f64), y: (f64, f64)) -> Chart {
        let mut img = RgbImage::from_pixel(PLOT_W, PLOT_H, WHITE);
        let (x0, x1) = (MARGIN as f64, (PLOT_W - MARGIN) as f64);
        let (y0, y1) = (MARGIN as f64, (PLOT_H - MARGIN) as f64);
        // Light quarter grid first so the frame and series draw over it.
        for i in 1..4 {
            let fx = x0 + (x1 - x0) * i as f64 / 4.0;
            let fy = y0 + (y1 - y0) * i as f64 / 4.0;
            draw_line(&mut img, [fx, y0], [fx, y1], GRID_GRAY);
            draw_line(&mut img, [x0, fy], [x1, fy], GRID_GRAY);
        }
        draw_line(&mut img, [x0, y0], [x1, y0], BLACK);
        draw_line(&mut img, [x1, y0], [x1, y1], BLACK);
        draw_line(&mut img, [x1, y1], [x0, y1], BLACK);
        draw_line(&mut img, [x0, y1], [x0, y0], BLACK);
        let widen = |(lo, hi): (f64, f64)| {
            if hi > lo {
                (lo, hi)
            } else {
                (lo - 0.5, lo + 0.5)
            }
        };
        Chart {
            img,
            x: widen(x),
            y: widen(y),
        }
    }

    fn map(&self, p: [f64; 2]) -> [f64; 2] {
        let fx = (p[0] - self.x.0) / (self.x.1 - self.x.0);
        let fy = (p[1] - self.y.0) / (self.y.1 - self.y.0);
        [
            MARGIN as f64 + fx * (PLOT_W - 2 * MARGIN) as f64,
            (PLOT_H - MARGIN) as f64 - fy * (PLOT_H - 2 * MARGIN) as f64,
        ]
    }

    fn polyline(&mut self, pts: &[[f64; 2]], color: Rgb<u8>) {
        if pts.len() == 1 {
            let p = self.map(pts[0]);
            draw_dot(&mut self.img, p, color);
        }
        for w in pts.windows(2) {
            let (a, b) = (self.map(w[0]), self.map(w[1]));
            draw_line(&mut self.img, a, b, color);
        }
    }
}

/// Data extent of several series, with a zero floor when requested.
fn extent(series: &[&[[f64; 2]]], include_zero_y: bool) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for p in *s {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    if include_zero_y {
        y0 = y0.min(0.0);
    }
    ((x0, x1), (y0, y1))
}

fn series_plot(series: &[Vec<[f64; 2]>], include_zero_y: bool) -> RgbImage {
    let refs: Vec<&[[f64; 2]]> = series.iter().map(|s| s.as_slice()).collect();
    let (x, y) = extent(&refs, include_zero_y);
    let mut chart = Chart::new(x, y);
    for (i, s) in series.iter().enumerate() {
        chart.polyline(s, PALETTE[i % PALETTE.len()]);
    }
    chart.img
}

/// Total plus per-stage losses against the training step.
pub fn loss_plot(curve: &[LossPoint]) -> RgbImage {
    let pick = |f: &dyn Fn(&LossPoint) -> f64| -> Vec<[f64; 2]> {
        curve.iter().map(|p| [p.step as f64, f(p)]).collect()
    };
    series_plot(
        &[
            pick(&|p| p.total),
            pick(&|p| p.l_seg),
            pick(&|p| p.l_map),
            pick(&|p| p.l_dn),
        ],
        true,
    )
}

/// Stage-agreement ratio against the training step (unit y-range).
pub fn util_plot(curve: &[LossPoint]) -> RgbImage {
    let pts: Vec<[f64; 2]> = curve
        .iter()
        .filter_map(|p| p.util.map(|u| [p.step as f64, u]))
        .collect();
    let (x, _) = extent(&[pts.as_slice()], false);
    let mut chart = Chart::new(x, (0.0, 1.0));
    chart.polyline(&pts, PALETTE[0]);
    chart.img
}

/// One recall/precision polyline per class on unit axes.
pub fn pr_plot(pr: &BTreeMap<String, Vec<[f64; 2]>>) -> RgbImage {
    let mut chart = Chart::new((0.0, 1.0), (0.0, 1.0));
    for (i, pts) in pr.values().enumerate() {
        chart.polyline(pts, PALETTE[i % PALETTE.len()]);
    }
    chart.img
}

/// Side-by-side panels, one per dumped sample: GT in green, predictions at or
/// above [`OVERLAY_SCORE_MIN`] in red with vertex dots.
pub fn overlay_image(samples: &[SampleDump], grid: &GridSpec) -> RgbImage {
    const GAP: u32 = 8;
    let scale = (256 / grid.height_px.max(grid.width_px).max(1)).max(2) as u32;
    let (pw, ph) = (
        grid.width_px as u32 * scale,
        grid.height_px as u32 * scale,
    );
    let n = samples.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(n * pw + (n + 1) * GAP, ph + 2 * GAP, WHITE);
    let gt_color = Rgb([0, 150, 0]);
    let pred_color = Rgb([210, 40, 40]);
    for (si, sample) in samples.iter().enumerate() {
        let ox = GAP as f64 + si as f64 * (pw + GAP) as f64;
        let oy = GAP as f64;
        let to_px = |p: [f64; 2]| [ox + p[0] * (pw - 1) as f64, oy + p[1] * (ph - 1) as f64];
        // Panel border.
        let corners = [
            [ox, oy],
            [ox + (pw - 1) as f64, oy],
            [ox + (pw - 1) as f64, oy + (ph - 1) as f64],
            [ox, oy + (ph - 1) as f64],
            [ox, oy],
        ];
        for w in corners.windows(2) {
            draw_line(&mut img, w[0], w[1], Rgb([180, 180, 180]));
        }
        let mut draw_inst = |inst: &MapInstance, color: Rgb<u8>, dots: bool| {
            let mut pts: Vec<[f64; 2]> = inst.points.iter().map(|&p| to_px(p)).collect();
            if inst.closed && pts.len() > 2 {
                pts.push(pts[0]);
            }
            for w in pts.windows(2) {
                draw_line(&mut img, w[0], w[1], color);
            }
            if dots {
                for p in &pts {
                    draw_dot(&mut img, *p, color);
                }
            }
        };
        for inst in &sample.gt {
            draw_inst(inst, gt_color, false);
        }
        for p in &sample.preds {
            if p.score >= OVERLAY_SCORE_MIN {
                draw_inst(&p.instance, pred_color, true);
            }
        }
    }
    img
}
