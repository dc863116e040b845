//! Procedural synthetic BEV scenes: a curved road corridor with two boundary
//! polylines, interpolated lane dividers, and optional pedestrian-crossing
//! quadrilaterals, rendered into noisy per-class raster channels.
//!
//! Generation is a pure function of `(SceneConfig, seed)`, so datasets can be
//! produced in parallel with per-scene seeds `seed + i` and reproduced
//! exactly. Persistence is line-delimited JSON with a header line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::{rasterize_instance, resample_polyline, ClassId, GridSpec, MapInstance};
use crate::par::par_map;

/// Input channel count: one raster channel per class plus a pure-noise
/// distractor.
pub const C_IN: usize = 4;

/// Stroke width for the rasterized input channels.
const INPUT_LINE_WIDTH_PX: usize = 2;

/// Corridor half-width range, normalized lateral units.
const HALF_WIDTH_RANGE: (f64, f64) = (0.16, 0.26);
/// Control-point lateral offsets for corridor endpoints, relative to center.
const ENDPOINT_SPREAD: f64 = 0.1;
/// Longitudinal extent of the corridor in normalized units.
const LON_MARGIN: f64 = 0.03;
/// Lateral clearance kept between any instance and the map edge.
const LAT_MARGIN: f64 = 0.01;
/// Number of samples along the quadratic centerline before resampling.
const CENTERLINE_SAMPLES: usize = 33;
/// Occlusion patches tile the grid in a 4x4 block layout.
const DROPOUT_BLOCKS: usize = 4;
/// Chance of a second crossing once the first was placed.
const SECOND_CROSSING_P: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub grid: GridSpec,
    /// Points per serialized instance.
    pub n_p: usize,
    /// Inclusive range for the number of lane dividers.
    pub n_dividers_range: (usize, usize),
    /// Probability that a scene contains at least one pedestrian crossing.
    pub p_crossing: f64,
    /// Range for the centerline control-point lateral offset (unitless).
    pub curvature_range: (f64, f64),
    /// Additive Gaussian sigma on the class raster channels.
    pub input_noise_sigma: f64,
    /// Per-block probability of zeroing an occlusion patch.
    pub occlusion_dropout_p: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            n_p: 20,
            n_dividers_range: (1, 3),
            p_crossing: 0.5,
            curvature_range: (0.0, 0.12),
            input_noise_sigma: 0.1,
            occlusion_dropout_p: 0.15,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_p < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "n_p must be >= 2, got {}",
                self.n_p
            )));
        }
        if self.n_dividers_range.0 > self.n_dividers_range.1 {
            return Err(CoreError::InvalidConfig(
                "n_dividers_range must be ordered".into(),
            ));
        }
        if self.curvature_range.0 > self.curvature_range.1 || self.curvature_range.0 < 0.0 {
            return Err(CoreError::InvalidConfig(
                "curvature_range must be ordered and non-negative".into(),
            ));
        }
        for (name, p) in [
            ("p_crossing", self.p_crossing),
            ("occlusion_dropout_p", self.occlusion_dropout_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::InvalidConfig(format!(
                    "{name} must be in [0,1], got {p}"
                )));
            }
        }
        if self.input_noise_sigma < 0.0 {
            return Err(CoreError::InvalidConfig(
                "input_noise_sigma must be >= 0".into(),
            ));
        }
        // Worst-case lateral footprint: corridor half-width plus endpoint
        // spread plus the curvature bulge must leave a lateral window for the
        // corridor center.
        let span = 2.0 * ENDPOINT_SPREAD + self.curvature_range.1;
        let window = 1.0 - 2.0 * LAT_MARGIN - 2.0 * HALF_WIDTH_RANGE.1 - span;
        if window <= 0.0 {
            return Err(CoreError::InfeasibleSceneConfig(format!(
                "curvature_range up to {} cannot fit the corridor laterally",
                self.curvature_range.1
            )));
        }
        Ok(())
    }
}

/// One synthetic scene: ground-truth vector instances plus the rendered
/// input volume, shape `(C_IN, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub instances: Vec<MapInstance>,
    pub input: Array3<f64>,
    pub seed: u64,
}

/// Quadratic Bezier through `p0, p1, p2` sampled at `n` parameter values.
fn bezier(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let u = 1.0 - t;
            [
                u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0],
                u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1],
            ]
        })
        .collect()
}

/// Lateral offset of each centerline sample by `d` (positive = right).
fn offset_lateral(center: &[[f64; 2]], d: f64) -> Vec<[f64; 2]> {
    center.iter().map(|p| [p[0] + d, p[1]]).collect()
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let half_width = rng.gen_range(HALF_WIDTH_RANGE.0..HALF_WIDTH_RANGE.1);
    let dx0 = rng.gen_range(-ENDPOINT_SPREAD..ENDPOINT_SPREAD);
    let dx2 = rng.gen_range(-ENDPOINT_SPREAD..ENDPOINT_SPREAD);
    let mag = rng.gen_range(cfg.curvature_range.0..=cfg.curvature_range.1);
    let curv = if rng.gen::<bool>() { mag } else { -mag };

    // Relative lateral positions of the three control points; the Bezier
    // stays inside their convex hull, so bounding them bounds the curve.
    let rel = [dx0, (dx0 + dx2) / 2.0 + curv, dx2];
    let rel_min = rel.iter().cloned().fold(f64::INFINITY, f64::min);
    let rel_max = rel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = LAT_MARGIN + half_width - rel_min;
    let hi = 1.0 - LAT_MARGIN - half_width - rel_max;
    if lo >= hi {
        return Err(CoreError::InfeasibleSceneConfig(format!(
            "corridor with half-width {half_width:.3} and curvature {curv:.3} does not fit"
        )));
    }
    let xc = rng.gen_range(lo..hi);

    let p0 = [xc + rel[0], LON_MARGIN];
    let p1 = [xc + rel[1], 0.5];
    let p2 = [xc + rel[2], 1.0 - LON_MARGIN];
    let center = bezier(p0, p1, p2, CENTERLINE_SAMPLES);

    let mut instances = Vec::new();
    for side in [-1.0, 1.0] {
        let pts = offset_lateral(&center, side * half_width);
        instances.push(MapInstance::new(
            ClassId::Boundary,
            resample_polyline(&pts, cfg.n_p, false)?,
        ));
    }

    let k = rng.gen_range(cfg.n_dividers_range.0..=cfg.n_dividers_range.1);
    for i in 0..k {
        // Evenly spaced lane fractions with jitter, kept off the boundaries.
        let base = (i as f64 + 1.0) / (k as f64 + 1.0);
        let jitter = rng.gen_range(-0.2..0.2) / (k as f64 + 1.0);
        let f = (base + jitter).clamp(0.12, 0.88);
        let d = (2.0 * f - 1.0) * half_width * 0.9;
        let pts = offset_lateral(&center, d);
        instances.push(MapInstance::new(
            ClassId::Divider,
            resample_polyline(&pts, cfg.n_p, false)?,
        ));
    }

    if rng.gen::<f64>() < cfg.p_crossing {
        let t1: f64 = rng.gen_range(0.15..0.85);
        let mut bands = vec![t1];
        if rng.gen::<f64>() < SECOND_CROSSING_P {
            let t2: f64 = rng.gen_range(0.15..0.85);
            if (t2 - t1).abs() > 0.2 {
                bands.push(t2);
            }
        }
        for t in bands {
            let dt = rng.gen_range(0.025..0.05);
            let quad = crossing_quad(&center, t, dt, half_width * 0.92);
            instances.push(MapInstance::new(
                ClassId::PedestrianCrossing,
                resample_polyline(&quad, cfg.n_p, true)?,
            ));
        }
    }

    for inst in &instances {
        inst.validate(cfg.n_p)?;
    }

    let input = render_input(&instances, cfg, &mut rng);
    Ok(SceneSample {
        instances,
        input,
        seed,
    })
}

/// Corners of a crossing band spanning the corridor at centerline parameter
/// `t`, half-extent `dt` along the curve, half-width `hw` across it.
fn crossing_quad(center: &[[f64; 2]], t: f64, dt: f64, hw: f64) -> Vec<[f64; 2]> {
    let at = |t: f64| -> [f64; 2] {
        let x = t.clamp(0.0, 1.0) * (center.len() - 1) as f64;
        let i = (x.floor() as usize).min(center.len() - 2);
        let frac = x - i as f64;
        let (a, b) = (center[i], center[i + 1]);
        [
            a[0] + frac * (b[0] - a[0]),
            a[1] + frac * (b[1] - a[1]),
        ]
    };
    let lo = at(t - dt);
    let hi = at(t + dt);
    vec![
        [lo[0] - hw, lo[1]],
        [lo[0] + hw, lo[1]],
        [hi[0] + hw, hi[1]],
        [hi[0] - hw, hi[1]],
    ]
}

/// Renders the input volume for a scene: per-class rasters corrupted by
/// additive Gaussian noise and block occlusion, plus a pure-noise channel.
/// Values are clamped to `[-3, 3]`. Draw order is fixed (channel noise in
/// channel-major pixel order, then the distractor channel, then dropout
/// decisions in block row-major order), so one seeded `rng` reproduces the
/// volume.
pub fn render_input<R: Rng>(
    instances: &[MapInstance],
    cfg: &SceneConfig,
    rng: &mut R,
) -> Array3<f64> {
    let (h, w) = (cfg.grid.height_px, cfg.grid.width_px);
    let mut input = Array3::<f64>::zeros((C_IN, h, w));

    for inst in instances {
        let mask = rasterize_instance(inst, &cfg.grid, INPUT_LINE_WIDTH_PX);
        let c = inst.class_id.index();
        for r in 0..h {
            for col in 0..w {
                if mask[[r, col]] > 0.0 {
                    input[[c, r, col]] = 1.0;
                }
            }
        }
    }

    for c in 0..NUM_CLASS_CHANNELS {
        for r in 0..h {
            for col in 0..w {
                let e: f64 = rng.sample(StandardNormal);
                input[[c, r, col]] += cfg.input_noise_sigma * e;
            }
        }
    }
    for r in 0..h {
        for col in 0..w {
            let e: f64 = rng.sample(StandardNormal);
            input[[C_IN - 1, r, col]] = e;
        }
    }

    // Occlusion zeroes whole blocks across the class channels after noise,
    // so a fully dropped grid is exactly zero there.
    let bh = h.div_ceil(DROPOUT_BLOCKS);
    let bw = w.div_ceil(DROPOUT_BLOCKS);
    for br in 0..DROPOUT_BLOCKS {
        for bc in 0..DROPOUT_BLOCKS {
            if rng.gen::<f64>() < cfg.occlusion_dropout_p {
                for r in (br * bh)..((br + 1) * bh).min(h) {
                    for col in (bc * bw)..((bc + 1) * bw).min(w) {
                        for c in 0..NUM_CLASS_CHANNELS {
                            input[[c, r, col]] = 0.0;
                        }
                    }
                }
            }
        }
    }

    input.mapv_inplace(|v| v.clamp(-3.0, 3.0));
    input
}

const NUM_CLASS_CHANNELS: usize = 3;

/// Generates `n` scenes with per-scene seeds `cfg.seed + i`, in parallel
/// under the default feature set.
pub fn generate_dataset(cfg: &SceneConfig, n: usize) -> Result<Vec<SceneSample>> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..n as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    par_map(&seeds, |&s| generate_scene(cfg, s))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: String,
    pub grid: GridSpec,
    pub n_p: usize,
    pub classes: Vec<String>,
}

pub const SCHEMA_VERSION: &str = "m2m-scene-v1";

/// Conventional dataset file name inside a dataset directory.
pub const DATASET_FILE: &str = "dataset.jsonl";

impl DatasetHeader {
    pub fn new(grid: GridSpec, n_p: usize) -> Self {
        Self {
            schema: SCHEMA_VERSION.to_string(),
            grid,
            n_p,
            classes: ClassId::ALL.iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct InstanceRow {
    class: ClassId,
    closed: bool,
    points: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct SceneRow {
    seed: u64,
    instances: Vec<InstanceRow>,
    input: String,
}

fn encode_input(input: &Array3<f64>) -> String {
    let mut bytes = Vec::with_capacity(input.len() * 4);
    for v in input.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_input(b64: &str, h: usize, w: usize) -> std::result::Result<Array3<f64>, String> {
    let bytes = B64.decode(b64).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 || h * w == 0 || bytes.len() % (4 * h * w) != 0 {
        return Err(format!(
            "input byte length {} does not tile {}x{} float32 channels",
            bytes.len(),
            h,
            w
        ));
    }
    let c = bytes.len() / (4 * h * w);
    let vals: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Array3::from_shape_vec((c, h, w), vals).map_err(|e| e.to_string())
}

/// Writes a dataset as line-delimited JSON: one header line, one scene per
/// following line. Instance coordinates round-trip exactly; inputs are
/// stored as little-endian `f32` in channel, row, column order.
pub fn save_dataset(
    samples: &[SceneSample],
    grid: &GridSpec,
    n_p: usize,
    path: &Path,
) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let header = DatasetHeader::new(*grid, n_p);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in samples {
        let row = SceneRow {
            seed: s.seed,
            instances: s
                .instances
                .iter()
                .map(|i| InstanceRow {
                    class: i.class_id,
                    closed: i.closed,
                    points: i.points.clone(),
                })
                .collect(),
            input: encode_input(&s.input),
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetHeader, Vec<SceneSample>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header_line = lines.next().ok_or(CoreError::Parse {
        line: 1,
        msg: "empty file, expected header".into(),
    })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| CoreError::Parse {
            line: 1,
            msg: e.to_string(),
        })?;
    if header.schema != SCHEMA_VERSION {
        return Err(CoreError::UnsupportedSchema(header.schema));
    }
    header.grid.validate()?;

    let mut samples = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SceneRow = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let input = decode_input(&row.input, header.grid.height_px, header.grid.width_px)
            .map_err(|msg| CoreError::Parse { line: lineno, msg })?;
        let instances: Vec<MapInstance> = row
            .instances
            .into_iter()
            .map(|i| MapInstance {
                class_id: i.class,
                points: i.points,
                closed: i.closed,
            })
            .collect();
        for inst in &instances {
            inst.validate(header.n_p).map_err(|e| CoreError::Parse {
                line: lineno,
                msg: e.to_string(),
            })?;
        }
        samples.push(SceneSample {
            instances,
            input,
            seed: row.seed,
        });
    }
    Ok((header, samples))
}
