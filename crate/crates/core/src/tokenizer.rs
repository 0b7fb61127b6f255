//! Sensor tokens and task-query initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, CANBUS_DIM, PLAN_MODES};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{ray_points, sincos_encode, CameraModel, DepthBins, PerceptionRange};
use crate::heads::PlanMode;
use crate::numerics::{concat_rows, mlp_forward, Activation, MlpParams, ParamId, ParamStore, Tape, Tensor, Var};

/// Row-major 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_err!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            ));
        }
        Ok(Self { width, height, data })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.iter().copied().cycle().take(width * height * 3).collect(),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Vehicle bus readings fed to the ego query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanbusState {
    pub speed: f64,
    pub yaw_rate: f64,
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
    pub command: PlanMode,
}

impl Default for CanbusState {
    fn default() -> Self {
        Self {
            speed: 0.0,
            yaw_rate: 0.0,
            steer: 0.0,
            throttle: 0.0,
            brake: 0.0,
            command: PlanMode::Straight,
        }
    }
}

impl CanbusState {
    pub fn command_one_hot(&self) -> [f64; PLAN_MODES] {
        let mut v = [0.0; PLAN_MODES];
        v[self.command.index()] = 1.0;
        v
    }

    /// `[speed / 10, yaw_rate, steer, throttle, brake, command one-hot]`.
    pub fn features(&self) -> [f64; CANBUS_DIM] {
        let mut f = [0.0; CANBUS_DIM];
        f[..5].copy_from_slice(&[self.speed / 10.0, self.yaw_rate, self.steer, self.throttle, self.brake]);
        f[5..].copy_from_slice(&self.command_one_hot());
        f
    }
}

/// Patch projection plus the ray-based position encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorEncoder {
    pub patch: MlpParams,
    pub pe: MlpParams,
}

impl SensorEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let p = cfg.patch_size;
        let d = cfg.hidden;
        Ok(Self {
            patch: MlpParams::new(store, "sensor.patch", &[p * p * 3, d], Activation::Identity, rng)?,
            pe: MlpParams::new(store, "sensor.pe", &[3 * cfg.depth_bins.count, d, d], Activation::Relu, rng)?,
        })
    }
}

/// Image tokens and their 3D position encodings.
///
/// `features` and `pe` are `(N_c * H * W) x D`, camera-major then row-major
/// over the patch grid.
#[derive(Clone, Debug)]
pub struct SensorTokens<'t> {
    pub features: Var<'t>,
    pub pe: Var<'t>,
    pub cameras: Vec<CameraModel>,
    pub grid: (usize, usize),
}

impl<'t> SensorTokens<'t> {
    pub fn num_cameras(&self) -> usize {
        self.cameras.len()
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[N_c, H, W, D]`.
    pub fn shape(&self) -> [usize; 4] {
        [self.cameras.len(), self.grid.0, self.grid.1, self.features.cols()]
    }
}

/// Flattened patches, one row of `patch * patch * 3` values in `[0, 1]` per
/// token, plus the `(rows, cols)` patch grid.
pub fn patchify(images: &[RgbImage], patch: usize) -> Result<(Tensor, (usize, usize))> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("no camera images".into()))?;
    let (w, h) = (first.width, first.height);
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} not divisible into {patch}-pixel patches"
        )));
    }
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(shape_err!("camera images differ in size"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * patch * 3;
    let mut data = Vec::with_capacity(images.len() * gh * gw * row_len);
    for im in images {
        for gi in 0..gh {
            for gj in 0..gw {
                for y in gi * patch..(gi + 1) * patch {
                    let start = 3 * (y * w + gj * patch);
                    data.extend(im.data[start..start + 3 * patch].iter().map(|&b| f64::from(b) / 255.0));
                }
            }
        }
    }
    Ok((Tensor::matrix(images.len() * gh * gw, row_len, data)?, (gh, gw)))
}

/// Ray-point features for every patch center of one camera: `(H * W) x 3K`,
/// each point mapped to `[-1, 1]` per axis of the perception range.
pub fn sensor_pe_inputs(
    cam: &CameraModel,
    patch: usize,
    bins: &DepthBins,
    range: &PerceptionRange,
) -> Result<Tensor> {
    if patch == 0 || cam.width % patch != 0 || cam.height % patch != 0 {
        return Err(Error::InvalidArgument(format!(
            "camera {}x{} not divisible into {patch}-pixel patches",
            cam.width, cam.height
        )));
    }
    let (gh, gw) = (cam.height / patch, cam.width / patch);
    let mut data = Vec::with_capacity(gh * gw * 3 * bins.count);
    for gi in 0..gh {
        for gj in 0..gw {
            let center = ((gj as f64 + 0.5) * patch as f64, (gi as f64 + 0.5) * patch as f64);
            for p in ray_points(cam, center, bins)? {
                data.extend(range.normalize(&[p.x, p.y, p.z]));
            }
        }
    }
    Tensor::matrix(gh * gw, 3 * bins.count, data)
}

/// Per-patch PE of one camera: the MLP over its concatenated ray points.
pub fn encode_sensor_pe<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    cam: &CameraModel,
    patch: usize,
    bins: &DepthBins,
    range: &PerceptionRange,
    params: &MlpParams,
) -> Result<Var<'t>> {
    let inputs = sensor_pe_inputs(cam, patch, bins, range)?;
    mlp_forward(tape, store, tape.constant(inputs), params)
}

pub fn tokenize_sensors<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    images: &[RgbImage],
    cameras: &[CameraModel],
    cfg: &ModelConfig,
    params: &SensorEncoder,
) -> Result<SensorTokens<'t>> {
    if images.len() != cameras.len() {
        return Err(shape_err!("{} images for {} cameras", images.len(), cameras.len()));
    }
    let (patches, grid) = patchify(images, cfg.patch_size)?;
    if let Some(c) = cameras
        .iter()
        .find(|c| c.width != images[0].width || c.height != images[0].height)
    {
        return Err(shape_err!(
            "camera is {}x{}, images are {}x{}",
            c.width,
            c.height,
            images[0].width,
            images[0].height
        ));
    }
    let features = mlp_forward(tape, store, tape.constant(patches), &params.patch)?;
    let pes = cameras
        .iter()
        .map(|c| encode_sensor_pe(tape, store, c, cfg.patch_size, &cfg.depth_bins, &cfg.perception, &params.pe))
        .collect::<Result<Vec<_>>>()?;
    let pe = if pes.len() == 1 { pes[0] } else { concat_rows(&pes) };
    Ok(SensorTokens {
        features,
        pe,
        cameras: cameras.to_vec(),
        grid,
    })
}

/// Explicit agent state behind an agent query's PE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentAnchor {
    pub center: [f64; 3],
    pub class_probs: Vec<f64>,
}

/// Learned query embeddings and the PE encoders shared by init and refresh.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryParams {
    pub agent_h: ParamId,
    pub map_instance: ParamId,
    pub map_point: ParamId,
    pub canbus: MlpParams,
    pub agent_pe: MlpParams,
    pub map_pe: MlpParams,
    pub ego_pe: MlpParams,
}

impl QueryParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden;
        let f = cfg.num_freqs;
        let mut embed = |name: &str, rows: usize, rng: &mut R| {
            let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.add(name, Tensor::matrix(rows, d, data)?)
        };
        let agent_h = embed("query.agent", cfg.num_agent_queries, rng)?;
        let map_instance = embed("query.map_instance", cfg.num_map_queries, rng)?;
        let map_point = embed("query.map_point", cfg.points_per_polyline, rng)?;
        let act = Activation::Relu;
        Ok(Self {
            agent_h,
            map_instance,
            map_point,
            canbus: MlpParams::new(store, "query.canbus", &[CANBUS_DIM, d, d], act, rng)?,
            agent_pe: MlpParams::new(store, "query.agent_pe", &[6 * f + cfg.agent_classes + 1, d, d], act, rng)?,
            map_pe: MlpParams::new(store, "query.map_pe", &[4 * f, d, d], act, rng)?,
            ego_pe: MlpParams::new(store, "query.ego_pe", &[2 * cfg.plan_horizon, d, d], act, rng)?,
        })
    }
}

/// Agent/map/ego embeddings with their position encodings and anchors.
///
/// Map rows are point level: row `i * N_point + j` is point `j` of polyline `i`.
#[derive(Clone, Debug)]
pub struct TaskQueries<'t> {
    pub agent_h: Var<'t>,
    pub agent_pe: Var<'t>,
    pub agent_anchor: Vec<AgentAnchor>,
    pub map_h: Var<'t>,
    pub map_pe: Var<'t>,
    pub map_anchor: Vec<Vec<[f64; 2]>>,
    pub ego_h: Var<'t>,
    pub ego_pe: Var<'t>,
    pub ego_anchor: Vec<[f64; 2]>,
}

impl<'t> TaskQueries<'t> {
    pub fn num_agents(&self) -> usize {
        self.agent_anchor.len()
    }

    pub fn num_map(&self) -> usize {
        self.map_anchor.len()
    }

    pub fn points_per_polyline(&self) -> usize {
        self.map_anchor.first().map_or(0, Vec::len)
    }
}

/// Seeded starting anchors for agent and map queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialAnchors {
    pub agents: Vec<[f64; 3]>,
    pub polylines: Vec<Vec<[f64; 2]>>,
}

impl InitialAnchors {
    /// Agent centers uniform in the perception box; map anchors are straight
    /// segments of a quarter of the x extent, clamped into the box.
    pub fn generate(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.num_agent_queries == 0 || cfg.num_map_queries == 0 || cfg.points_per_polyline == 0 {
            return Err(Error::Config("query counts must be positive".into()));
        }
        let r = cfg.perception;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agents = (0..cfg.num_agent_queries)
            .map(|_| {
                [
                    rng.random_range(r.x.0..=r.x.1),
                    rng.random_range(r.y.0..=r.y.1),
                    rng.random_range(r.z.0..=r.z.1),
                ]
            })
            .collect();
        let len = 0.25 * (r.x.1 - r.x.0);
        let n = cfg.points_per_polyline;
        let polylines = (0..cfg.num_map_queries)
            .map(|_| {
                let cx = rng.random_range(r.x.0..=r.x.1);
                let cy = rng.random_range(r.y.0..=r.y.1);
                let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let (s, c) = th.sin_cos();
                (0..n)
                    .map(|k| {
                        let a = if n == 1 { 0.0 } else { k as f64 / (n - 1) as f64 - 0.5 };
                        [
                            (cx + a * len * c).clamp(r.x.0, r.x.1),
                            (cy + a * len * s).clamp(r.y.0, r.y.1),
                        ]
                    })
                    .collect()
            })
            .collect();
        Ok(Self { agents, polylines })
    }
}

pub fn agent_pe_input(anchor: &AgentAnchor, num_freqs: usize) -> Vec<f64> {
    let mut v = sincos_encode(&anchor.center, num_freqs);
    v.extend_from_slice(&anchor.class_probs);
    v
}

pub fn encode_agent_pe<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    anchors: &[AgentAnchor],
    num_freqs: usize,
    params: &MlpParams,
) -> Result<Var<'t>> {
    let rows: Vec<Vec<f64>> = anchors.iter().map(|a| agent_pe_input(a, num_freqs)).collect();
    mlp_forward(tape, store, tape.constant(Tensor::from_rows(&rows)?), params)
}

/// Point-level map PE, one row per polyline point.
pub fn encode_map_pe<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    polylines: &[Vec<[f64; 2]>],
    num_freqs: usize,
    params: &MlpParams,
) -> Result<Var<'t>> {
    let rows: Vec<Vec<f64>> = polylines
        .iter()
        .flatten()
        .map(|p| sincos_encode(p, num_freqs))
        .collect();
    mlp_forward(tape, store, tape.constant(Tensor::from_rows(&rows)?), params)
}

/// Ego PE from the flattened planned trajectory.
pub fn encode_ego_pe<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    trajectory: &[[f64; 2]],
    params: &MlpParams,
) -> Result<Var<'t>> {
    let flat: Vec<f64> = trajectory.iter().flatten().copied().collect();
    let n = flat.len();
    mlp_forward(tape, store, tape.constant(Tensor::matrix(1, n, flat)?), params)
}

pub fn init_task_queries<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    params: &QueryParams,
    anchors: &InitialAnchors,
    canbus: &CanbusState,
) -> Result<TaskQueries<'t>> {
    let (na, nm, np) = (cfg.num_agent_queries, cfg.num_map_queries, cfg.points_per_polyline);
    if na == 0 || nm == 0 || np == 0 {
        return Err(Error::Config("query counts must be positive".into()));
    }
    if anchors.agents.len() != na || anchors.polylines.len() != nm || anchors.polylines.iter().any(|p| p.len() != np) {
        return Err(shape_err!("initial anchors do not match the query counts"));
    }
    let uniform = vec![1.0 / (cfg.agent_classes + 1) as f64; cfg.agent_classes + 1];
    let agent_anchor: Vec<AgentAnchor> = anchors
        .agents
        .iter()
        .map(|&center| AgentAnchor {
            center,
            class_probs: uniform.clone(),
        })
        .collect();
    let agent_h = tape.param(store, params.agent_h);
    let agent_pe = encode_agent_pe(tape, store, &agent_anchor, cfg.num_freqs, &params.agent_pe)?;

    let inst_idx: Vec<usize> = (0..nm * np).map(|r| r / np).collect();
    let point_idx: Vec<usize> = (0..nm * np).map(|r| r % np).collect();
    let map_h = tape
        .param(store, params.map_instance)
        .gather_rows(&inst_idx)
        .add(tape.param(store, params.map_point).gather_rows(&point_idx));
    let map_pe = encode_map_pe(tape, store, &anchors.polylines, cfg.num_freqs, &params.map_pe)?;

    let canbus_row = Tensor::matrix(1, CANBUS_DIM, canbus.features().to_vec())?;
    let ego_h = mlp_forward(tape, store, tape.constant(canbus_row), &params.canbus)?;
    let ego_pe = tape.constant(Tensor::zeros(&[1, cfg.hidden]));

    Ok(TaskQueries {
        agent_h,
        agent_pe,
        agent_anchor,
        map_h,
        map_pe,
        map_anchor: anchors.polylines.clone(),
        ego_h,
        ego_pe,
        ego_anchor: vec![[0.0; 2]; cfg.plan_horizon],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;
    use crate::numerics::Linear;
    use nalgebra::Matrix3;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            num_agent_queries: 5,
            num_map_queries: 3,
            points_per_polyline: 4,
            patch_size: 8,
            num_freqs: 3,
            ..ModelConfig::desk(Preset::Small)
        }
    }

    fn zero_linear(store: &mut ParamStore, l: &Linear) {
        let w = store.get(l.weight).clone();
        store.set(l.weight, Tensor::zeros(w.shape())).unwrap();
    }

    fn cameras(n: usize, size: usize) -> Vec<CameraModel> {
        (0..n)
            .map(|i| CameraModel::looking(i as f64 * std::f64::consts::FRAC_PI_2, 1.6, 60f64.to_radians(), size, size))
            .collect()
    }

    #[test]
    fn token_grid_shape() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = SensorEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let images = vec![RgbImage::black(32, 32); 2];
        let s = tokenize_sensors(&tape, &store, &images, &cameras(2, 32), &cfg, &enc).unwrap();
        assert_eq!(s.shape(), [2, 4, 4, 8]);
        assert_eq!(s.features.shape(), s.pe.shape());
        for v in s.features.value().data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn indivisible_image_rejected() {
        let images = vec![RgbImage::black(30, 32)];
        assert!(patchify(&images, 8).is_err());
        assert!(RgbImage::new(2, 2, vec![0; 5]).is_err());
    }

    #[test]
    fn white_patch_matches_matmul() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = SensorEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let mut img = RgbImage::black(16, 16);
        for y in 0..8 {
            for x in 8..16 {
                img.set_pixel(x, y, [255, 255, 255]);
            }
        }
        let tape = Tape::new();
        let s = tokenize_sensors(&tape, &store, &[img], &cameras(1, 16), &cfg, &enc).unwrap();
        let w = store.get(enc.patch.layers[0].weight);
        let b = store.get(enc.patch.layers[0].bias);
        let feats = s.features.value();
        for c in 0..8 {
            let expected: f64 = (0..192).map(|r| w.at(r, c)).sum::<f64>() + b.data()[c];
            assert!((feats.at(1, c) - expected).abs() < 1e-12);
            assert_eq!(feats.at(0, c), b.data()[c]);
        }
    }

    #[test]
    fn sensor_pe_composes_rays_and_mlp() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SensorEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let cam = &cameras(1, 32)[0];
        let tape = Tape::new();
        let pe = encode_sensor_pe(&tape, &store, cam, 8, &cfg.depth_bins, &cfg.perception, &enc.pe).unwrap();
        let pts = ray_points(cam, (4.0, 4.0), &cfg.depth_bins).unwrap();
        let mut x: Vec<f64> = pts.iter().flat_map(|p| cfg.perception.normalize(&[p.x, p.y, p.z])).collect();
        for (li, layer) in enc.pe.layers.iter().enumerate() {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias);
            let mut y: Vec<f64> = (0..w.shape()[1])
                .map(|c| b.data()[c] + x.iter().enumerate().map(|(r, v)| v * w.at(r, c)).sum::<f64>())
                .collect();
            if li == 0 {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = y;
        }
        let got = pe.value();
        for c in 0..8 {
            assert!((got.at(0, c) - x[c]).abs() < 1e-12);
        }
        let same = CameraModel::new(cam.intrinsics, cam.extrinsics, 32, 32).unwrap();
        let tape2 = Tape::new();
        let pe2 = encode_sensor_pe(&tape2, &store, &same, 8, &cfg.depth_bins, &cfg.perception, &enc.pe).unwrap();
        assert_eq!(pe.value().data(), pe2.value().data());
    }

    #[test]
    fn zero_weight_pe_is_constant() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = SensorEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let last = *enc.pe.last();
        zero_linear(&mut store, &last);
        store.set(last.bias, Tensor::vector((0..8).map(f64::from).collect())).unwrap();
        let tape = Tape::new();
        let cam = CameraModel::new(Matrix3::new(20.0, 0.0, 16.0, 0.0, 20.0, 16.0, 0.0, 0.0, 1.0), Default::default(), 32, 32).unwrap();
        let pe = encode_sensor_pe(&tape, &store, &cam, 8, &cfg.depth_bins, &cfg.perception, &enc.pe).unwrap();
        let v = pe.value();
        for r in 0..v.rows() {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn task_queries_default_counts_and_zero_ego_pe() {
        let cfg = ModelConfig::preset(Preset::Small);
        let a = InitialAnchors::generate(&cfg, 7).unwrap();
        assert_eq!(a.agents.len(), 900);
        assert_eq!(a.polylines.len(), 100);
        assert_eq!(a, InitialAnchors::generate(&cfg, 7).unwrap());
        assert_ne!(a, InitialAnchors::generate(&cfg, 8).unwrap());
        for c in &a.agents {
            assert!(cfg.perception.contains(c));
        }
        for p in a.polylines.iter().flatten() {
            assert!(cfg.perception.contains_xy(p[0], p[1]));
        }

        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qp = QueryParams::new(&mut store, &cfg, &mut rng).unwrap();
        let anchors = InitialAnchors::generate(&cfg, 1).unwrap();
        let tape = Tape::new();
        let tq = init_task_queries(&tape, &store, &cfg, &qp, &anchors, &CanbusState::default()).unwrap();
        assert_eq!(tq.ego_pe.shape(), vec![1, 8]);
        assert!(tq.ego_pe.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(tq.agent_h.shape(), tq.agent_pe.shape());
        assert_eq!(tq.map_h.shape(), tq.map_pe.shape());
        assert_eq!(tq.map_h.shape(), vec![12, 8]);
        assert_eq!(tq.ego_h.shape(), tq.ego_pe.shape());

        let mut bad = cfg.clone();
        bad.num_agent_queries = 0;
        assert!(InitialAnchors::generate(&bad, 0).is_err());
    }

    #[test]
    fn canbus_one_hot() {
        for m in PlanMode::ALL {
            let c = CanbusState {
                command: m,
                ..Default::default()
            };
            let f = c.features();
            assert_eq!(f[5..].iter().sum::<f64>(), 1.0);
            assert_eq!(f[5 + m.index()], 1.0);
        }
    }

    #[test]
    fn tokenize_is_bit_identical() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = SensorEncoder::new(&mut store, &cfg, &mut rng).unwrap();
        let data: Vec<u8> = (0..32 * 32 * 3).map(|i| (i * 37 % 251) as u8).collect();
        let images = vec![RgbImage::new(32, 32, data).unwrap(); 2];
        let run = || {
            let tape = Tape::new();
            let s = tokenize_sensors(&tape, &store, &images, &cameras(2, 32), &cfg, &enc).unwrap();
            let out = (s.features.value().data().to_vec(), s.pe.value().data().to_vec());
            out
        };
        assert_eq!(run(), run());
    }
}
