//! Parameter ownership and the per-frame forward pass.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{shape_err, Result};
use crate::geometry::{CameraModel, RigidTransform};
use crate::heads::{aggregate_map, FramePredictions, HeadParams};
use crate::numerics::{ParamStore, Tape, Var};
use crate::temporal_memory::{build_temporal_kv, Anchor, FrameMemory, TemporalParams, TemporalQueue};
use crate::tokenizer::{init_task_queries, tokenize_sensors, CanbusState, InitialAnchors, QueryParams, RgbImage, SensorEncoder};
use crate::transformer_blocks::{stack_forward, BlockParams, Dropout, StackOutput};

/// Parameter handles of every module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelParams {
    pub sensor: SensorEncoder,
    pub queries: QueryParams,
    pub temporal: TemporalParams,
    pub blocks: Vec<BlockParams>,
    pub heads: HeadParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DriveTransformer {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
    pub anchors: InitialAnchors,
}

/// Everything the model reads for one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub images: &'a [RgbImage],
    pub cameras: &'a [CameraModel],
    pub canbus: CanbusState,
    pub step: i64,
    /// Ego-to-world pose for the current step and every queued step.
    pub ego_poses: &'a BTreeMap<i64, RigidTransform>,
}

impl DriveTransformer {
    /// Parameters drawn from `cfg.seed`.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let sensor = SensorEncoder::new(&mut store, &cfg, &mut rng)?;
        let queries = QueryParams::new(&mut store, &cfg, &mut rng)?;
        let temporal = TemporalParams::new(&mut store, &cfg, &mut rng)?;
        let blocks = (0..cfg.num_layers)
            .map(|l| BlockParams::new(&mut store, &format!("block{l}"), &cfg, &mut rng))
            .collect::<Result<_>>()?;
        let heads = HeadParams::new(&mut store, &cfg, &mut rng)?;
        let anchors = InitialAnchors::generate(&cfg, cfg.seed)?;
        Ok(Self {
            cfg,
            store,
            params: ModelParams {
                sensor,
                queries,
                temporal,
                blocks,
                heads,
            },
            anchors,
        })
    }

    pub fn new_queue(&self) -> TemporalQueue {
        TemporalQueue::new(self.cfg.queue_len).expect("validated queue length")
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        input: &FrameInput<'_>,
        queue: &TemporalQueue,
        drop: Option<&Dropout>,
    ) -> Result<StackOutput<'t>> {
        self.forward_with(tape, &self.store, input, queue, drop)
    }

    /// [`Self::forward`] reading parameter values from `store`, which must
    /// share this model's layout.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        input: &FrameInput<'_>,
        queue: &TemporalQueue,
        drop: Option<&Dropout>,
    ) -> Result<StackOutput<'t>> {
        let p = &self.params;
        let sensors = tokenize_sensors(tape, store, input.images, input.cameras, &self.cfg, &p.sensor)?;
        let tq0 = init_task_queries(tape, store, &self.cfg, &p.queries, &self.anchors, &input.canbus)?;
        if !input.ego_poses.contains_key(&input.step) {
            return Err(shape_err!("no ego pose for the current step {}", input.step));
        }
        let kv = build_temporal_kv(tape, store, queue, input.step, input.ego_poses, &p.temporal, &self.cfg)?;
        stack_forward(tape, store, &tq0, &sensors, &kv, &p.blocks, &p.heads, &p.queries, &self.cfg, drop)
    }

    /// Final-block state to queue: instance-level map rows, scores from the
    /// most likely foreground class. Embeddings are stored row-normalized
    /// (zero mean, unit variance) so history magnitude cannot compound
    /// across frames through the residual stream.
    pub fn frame_memory(&self, out: &StackOutput<'_>) -> Result<FrameMemory> {
        let tq = out.final_queries();
        let preds: &FramePredictions = out.final_predictions();
        let tape = tq.agent_h.tape();
        let inference = Tape::inference(tape.precision());
        let map_h = inference.constant((*tq.map_h.value()).clone());
        let map_inst = aggregate_map(
            &inference,
            &self.store,
            map_h,
            tq.points_per_polyline(),
            &self.params.heads.pointnet,
        )?
        .layer_norm();
        let normed = |h: &Var<'_>| (*inference.constant((*h.value()).clone()).layer_norm().value()).clone();
        Ok(FrameMemory {
            agent_h: normed(&tq.agent_h),
            agent_anchors: preds
                .boxes
                .iter()
                .map(|b| Anchor::Agent {
                    center: b.center,
                    heading: b.heading,
                    velocity: b.velocity,
                })
                .collect(),
            agent_scores: preds.boxes.iter().map(|b| b.best_class().1).collect(),
            map_h: (*map_inst.value()).clone(),
            map_anchors: preds.map.iter().map(|m| Anchor::Map(m.points.clone())).collect(),
            map_scores: preds.map.iter().map(|m| m.best_class().1).collect(),
            ego_h: normed(&tq.ego_h),
        })
    }
}
