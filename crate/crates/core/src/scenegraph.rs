//! Visual-semantic graph attention interaction head.
//!
//! Each frame is a star graph: one defective-tissue node joined to every
//! instrument node. Visual and semantic node features are propagated by one
//! attention round each, fused per node, and every tissue-instrument edge is
//! classified from both endpoint features, the box geometry, and optionally a
//! frame-level feature from the segmentation side.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BoxFeatureLayer, Encoder};
use crate::geometry::NormBox;
use crate::labels::{LabelMap, NODE_SEMANTICS, NUM_INTERACTIONS, TISSUE_NODE};
use crate::nn::{ensure_finite, leaky_relu, softmax, Linear};
use crate::params::{Init, Kind};
use crate::{Error, Result};

/// Width of the per-edge box geometry feature.
pub const SPATIAL_DIM: usize = 12;
/// Seed of the semantic embedding table; fixed so every model shares it.
pub const SEMANTIC_TABLE_SEED: u64 = 0x5eed_0064;

/// Per-frame graph annotation as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub boxes: Vec<NormBox>,
    /// Node ids: 0 is the defective tissue, 1..7 instrument classes.
    pub semantics: Vec<u8>,
    /// (tissue node, instrument node) index pairs.
    pub edges: Vec<[usize; 2]>,
    /// One 13-way binary interaction vector per edge.
    pub targets: Vec<[u8; NUM_INTERACTIONS]>,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        let m = self.boxes.len();
        if self.semantics.len() != m {
            return Err(Error::data(format!(
                "{m} boxes but {} semantic ids",
                self.semantics.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            b.validate()
                .map_err(|e| Error::data(format!("box {i}: {e}")))?;
        }
        if let Some((i, s)) = self
            .semantics
            .iter()
            .enumerate()
            .find(|(_, &s)| s as usize >= NODE_SEMANTICS.len())
        {
            return Err(Error::data(format!("node {i} has unknown semantic id {s}")));
        }
        let tissue = self.tissue_node()?;
        if self.targets.len() != self.edges.len() {
            return Err(Error::data(format!(
                "{} edges but {} target vectors",
                self.edges.len(),
                self.targets.len()
            )));
        }
        let mut seen = vec![false; m];
        for (e, &[t, i]) in self.edges.iter().enumerate() {
            if t != tissue {
                return Err(Error::data(format!(
                    "edge {e} does not start at the tissue node {tissue}"
                )));
            }
            if i >= m || i == tissue {
                return Err(Error::data(format!(
                    "edge {e} points at invalid instrument node {i}"
                )));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::data(format!("edge {e} repeats instrument node {i}")));
            }
        }
        for (e, t) in self.targets.iter().enumerate() {
            if let Some(v) = t.iter().find(|&&v| v > 1) {
                return Err(Error::data(format!(
                    "edge {e} has non-binary target value {v}"
                )));
            }
        }
        Ok(())
    }

    /// Index of the single tissue node.
    pub fn tissue_node(&self) -> Result<usize> {
        let mut it = self
            .semantics
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == TISSUE_NODE);
        let (first, _) = it
            .next()
            .ok_or_else(|| Error::data("frame has no tissue node"))?;
        if let Some((second, _)) = it.next() {
            return Err(Error::data(format!(
                "frame has two tissue nodes ({first} and {second})"
            )));
        }
        Ok(first)
    }

    /// Instrument node of each edge, in edge order.
    pub fn instruments(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e[1]).collect()
    }
}

/// A frame ready for the model: normalized image, optional mask, graph.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub frame_id: String,
    /// 3×H×W normalized image.
    pub image: Tensor,
    pub mask: Option<LabelMap>,
    pub annotation: Annotation,
}

/// What the edge classifier receives beyond node and box features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EdgeMode {
    None,
    /// Interaction-space feature of the segmentation bottleneck unit.
    #[default]
    Gisf,
    /// Pooled penultimate decoder feature.
    Pf,
}

impl EdgeMode {
    pub fn name(self) -> &'static str {
        match self {
            EdgeMode::None => "NONE",
            EdgeMode::Gisf => "GISF",
            EdgeMode::Pf => "PF",
        }
    }
}

impl std::str::FromStr for EdgeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" => Ok(EdgeMode::None),
            "GISF" => Ok(EdgeMode::Gisf),
            "PF" => Ok(EdgeMode::Pf),
            _ => Err(Error::Config(format!(
                "unknown edge mode `{s}` (expected NONE, GISF or PF)"
            ))),
        }
    }
}

/// Box geometry of one edge: both boxes, the center offset and log size
/// ratios, instrument relative to tissue.
pub fn spatial_feature(tissue: &NormBox, instrument: &NormBox) -> [f64; SPATIAL_DIM] {
    let (tcx, tcy) = tissue.center();
    let (icx, icy) = instrument.center();
    [
        tissue.x1,
        tissue.y1,
        tissue.x2,
        tissue.y2,
        instrument.x1,
        instrument.y1,
        instrument.x2,
        instrument.y2,
        icx - tcx,
        icy - tcy,
        (instrument.width() / tissue.width()).ln(),
        (instrument.height() / tissue.height()).ln(),
    ]
}

pub fn spatial_features(annotation: &Annotation, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(annotation.edges.len() * SPATIAL_DIM);
    for &[t, i] in &annotation.edges {
        v.extend(spatial_feature(&annotation.boxes[t], &annotation.boxes[i]));
    }
    Ok(
        Tensor::from_vec(v, (annotation.edges.len(), SPATIAL_DIM), &Device::Cpu)?
            .to_dtype(dtype)?,
    )
}

/// Neighborhoods of the undirected graph, self loops included.
pub fn neighborhoods(nodes: usize, edges: &[[usize; 2]]) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; nodes]; nodes];
    for (i, row) in adj.iter_mut().enumerate() {
        row[i] = true;
    }
    for &[a, b] in edges {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    adj
}

/// Single-head graph attention layer.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    w: Linear,
    a_src: Tensor,
    a_dst: Tensor,
    slope: f64,
}

impl GraphAttention {
    pub fn new(init: &mut Init, dim: usize) -> Result<Self> {
        let w = Linear::no_bias(&mut init.sub("w"), dim, dim)?;
        let std = (1.0 / dim as f64).sqrt();
        Ok(Self {
            w,
            a_src: init.normal("a_src", &[dim, 1], std)?,
            a_dst: init.normal("a_dst", &[dim, 1], std)?,
            slope: 0.2,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.in_features()
    }

    /// Propagates M×D node features over `adj`; returns the new features and
    /// the M×M attention matrix (rows sum to one).
    pub fn attend(&self, h: &Tensor, adj: &[Vec<bool>]) -> Result<(Tensor, Tensor)> {
        let (m, d) = h.dims2()?;
        if d != self.dim() {
            return Err(Error::Shape(format!(
                "attention built for width {}, got {d}",
                self.dim()
            )));
        }
        if m == 0 || adj.len() != m {
            return Err(Error::Shape(format!(
                "need M ≥ 1 nodes and an M×M adjacency, got M={m}"
            )));
        }
        let wh = self.w.forward(h)?;
        let s = wh.matmul(&self.a_src)?;
        let t = wh.matmul(&self.a_dst)?.t()?;
        let scores = leaky_relu(&s.broadcast_add(&t)?, self.slope)?;
        let mask: Vec<f64> = adj
            .iter()
            .flat_map(|row| {
                row.iter()
                    .map(|&on| if on { 0.0 } else { f64::NEG_INFINITY })
            })
            .collect();
        let mask = Tensor::from_vec(mask, (m, m), h.device())?.to_dtype(h.dtype())?;
        let alpha = softmax(&(scores + mask)?, 1)?;
        let out = alpha.matmul(&wh)?.elu(1.0)?;
        Ok((out, alpha))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraphConfig {
    pub visual_dim: usize,
    pub semantic_dim: usize,
    pub fused_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub edge_mode: EdgeMode,
    /// Width of the frame-level feature appended to each edge.
    pub extra_dim: usize,
    /// Width of the penultimate decoder feature compressed in PF mode.
    pub penultimate_dim: usize,
    pub trainable_semantics: bool,
}

impl Default for SceneGraphConfig {
    fn default() -> Self {
        Self {
            visual_dim: 512,
            semantic_dim: 64,
            fused_dim: 256,
            hidden: 256,
            classes: NUM_INTERACTIONS,
            edge_mode: EdgeMode::Gisf,
            extra_dim: 64,
            penultimate_dim: 64,
            trainable_semantics: false,
        }
    }
}

impl SceneGraphConfig {
    /// Width of the concatenated edge feature (without the extra slice).
    pub fn edge_dim(&self) -> usize {
        2 * self.fused_dim + SPATIAL_DIM
    }
}

/// Visual, semantic and fused node features of one frame plus its edge
/// features.
#[derive(Debug, Clone)]
pub struct GraphBundle {
    pub visual: Tensor,
    pub semantic: Tensor,
    pub fused: Tensor,
    pub visual_attention: Tensor,
    pub semantic_attention: Tensor,
    /// E×(2·fused + 12) concatenation [h_tissue ‖ h_instrument ‖ F_sf].
    pub edge_features: Tensor,
}

impl GraphBundle {
    pub fn num_edges(&self) -> usize {
        self.edge_features.dim(0).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct SceneGraphHead {
    config: SceneGraphConfig,
    semantic_table: Tensor,
    visual_gat: GraphAttention,
    semantic_gat: GraphAttention,
    fuse: Linear,
    readout: Linear,
    extra: Option<Linear>,
    pf_compress: Option<Linear>,
    out: Linear,
}

impl SceneGraphHead {
    /// Builds the head under `sg.*` of a root-level initializer.
    pub fn new(root: &mut Init, config: SceneGraphConfig) -> Result<Self> {
        let mut init = root.sub("sg");
        let mut table_rng = ChaCha8Rng::seed_from_u64(SEMANTIC_TABLE_SEED);
        let mut table = Vec::with_capacity(NODE_SEMANTICS.len() * config.semantic_dim);
        {
            use rand_distr::{Distribution, StandardNormal};
            for _ in 0..NODE_SEMANTICS.len() * config.semantic_dim {
                let v: f64 = StandardNormal.sample(&mut table_rng);
                table.push(v);
            }
        }
        let table = Tensor::from_vec(
            table,
            (NODE_SEMANTICS.len(), config.semantic_dim),
            &Device::Cpu,
        )?;
        let kind = if config.trainable_semantics {
            Kind::Trainable
        } else {
            Kind::Buffer
        };
        let semantic_table = init.put("semantic_table", table, kind)?;
        let visual_gat = GraphAttention::new(&mut init.sub("visual_gat"), config.visual_dim)?;
        let semantic_gat = GraphAttention::new(&mut init.sub("semantic_gat"), config.semantic_dim)?;
        let fuse = Linear::new(
            &mut init.sub("fuse"),
            config.visual_dim + config.semantic_dim,
            config.fused_dim,
        )?;
        let readout = Linear::new(&mut init.sub("readout"), config.edge_dim(), config.hidden)?;
        let out = Linear::new(&mut init.sub("out"), config.hidden, config.classes)?;
        // mode-specific layers last so that shared layers initialize alike
        // across edge modes
        let extra = match config.edge_mode {
            EdgeMode::None => None,
            _ => Some(Linear::no_bias(
                &mut init.sub("readout_extra"),
                config.extra_dim,
                config.hidden,
            )?),
        };
        let pf_compress = match config.edge_mode {
            EdgeMode::Pf => Some(Linear::new(
                &mut init.sub("pf_compress"),
                config.penultimate_dim,
                config.extra_dim,
            )?),
            _ => None,
        };
        Ok(Self {
            config,
            semantic_table,
            visual_gat,
            semantic_gat,
            fuse,
            readout,
            extra,
            pf_compress,
            out,
        })
    }

    pub fn config(&self) -> &SceneGraphConfig {
        &self.config
    }

    pub fn edge_mode(&self) -> EdgeMode {
        self.config.edge_mode
    }

    pub fn visual_attention(&self) -> &GraphAttention {
        &self.visual_gat
    }

    pub fn semantic_attention(&self) -> &GraphAttention {
        &self.semantic_gat
    }

    pub fn semantic_table(&self) -> &Tensor {
        &self.semantic_table
    }

    /// Builds the three graphs from precomputed M×visual_dim box features.
    pub fn graphs(&self, visual: &Tensor, annotation: &Annotation) -> Result<GraphBundle> {
        annotation.validate()?;
        let m = annotation.boxes.len();
        if visual.dims() != [m, self.config.visual_dim] {
            return Err(Error::Shape(format!(
                "expected {m}×{} box features, got {:?}",
                self.config.visual_dim,
                visual.dims()
            )));
        }
        ensure_finite(visual, "box features")?;
        let adj = neighborhoods(m, &annotation.edges);
        let ids: Vec<u32> = annotation.semantics.iter().map(|&s| s as u32).collect();
        let ids = Tensor::from_vec(ids, m, visual.device())?;
        let semf = self
            .semantic_table
            .index_select(&ids, 0)?
            .to_dtype(visual.dtype())?;
        let (gv, av) = self.visual_gat.attend(visual, &adj)?;
        let (gs, as_) = self.semantic_gat.attend(&semf, &adj)?;
        let fused = self.fuse.forward(&Tensor::cat(&[&gv, &gs], 1)?)?;
        ensure_finite(&fused, "fused node features")?;
        let edge_features = self.edge_features(&fused, annotation)?;
        Ok(GraphBundle {
            visual: gv,
            semantic: gs,
            fused,
            visual_attention: av,
            semantic_attention: as_,
            edge_features,
        })
    }

    /// Box features from `encoder`, then [`SceneGraphHead::graphs`].
    pub fn build_graphs(
        &self,
        encoder: &Encoder,
        sample: &SceneSample,
        layer: BoxFeatureLayer,
    ) -> Result<GraphBundle> {
        let visual =
            encoder.extract_box_features(&sample.image, &sample.annotation.boxes, layer)?;
        self.graphs(&visual, &sample.annotation)
    }

    fn edge_features(&self, fused: &Tensor, annotation: &Annotation) -> Result<Tensor> {
        let e = annotation.edges.len();
        let dt = fused.dtype();
        if e == 0 {
            return Ok(Tensor::zeros(
                (0, self.config.edge_dim()),
                dt,
                fused.device(),
            )?);
        }
        let idx = |k: usize| -> Result<Tensor> {
            let v: Vec<u32> = annotation.edges.iter().map(|p| p[k] as u32).collect();
            Ok(Tensor::from_vec(v, e, fused.device())?)
        };
        let ht = fused.index_select(&idx(0)?, 0)?;
        let hi = fused.index_select(&idx(1)?, 0)?;
        let sf = spatial_features(annotation, dt)?;
        Ok(Tensor::cat(&[&ht, &hi, &sf], 1)?)
    }

    /// Maps the frame-level input of the current mode to the extra slice:
    /// the interaction-space feature as is, or the compressed penultimate
    /// feature.
    pub fn frame_extra(
        &self,
        gisf: Option<&Tensor>,
        penultimate: Option<&Tensor>,
    ) -> Result<Option<Tensor>> {
        match self.config.edge_mode {
            EdgeMode::None => Ok(None),
            EdgeMode::Gisf => Ok(Some(
                gisf.ok_or_else(|| {
                    Error::invalid("GISF edge mode needs the interaction-space feature")
                })?
                .clone(),
            )),
            EdgeMode::Pf => {
                let p = penultimate
                    .ok_or_else(|| Error::invalid("PF edge mode needs the penultimate feature"))?;
                let c = self.pf_compress.as_ref().expect("PF head has a compressor");
                Ok(Some(c.forward(&p.unsqueeze(0)?)?.squeeze(0)?))
            }
        }
    }

    /// E×13 interaction logits of one frame. `extra` is the frame-level
    /// vector of width `extra_dim` (already compressed in PF mode).
    pub fn edge_readout(&self, bundle: &GraphBundle, extra: Option<&Tensor>) -> Result<Tensor> {
        let ef = &bundle.edge_features;
        let (e, d) = ef.dims2()?;
        if d != self.config.edge_dim() {
            return Err(Error::Shape(format!(
                "edge features are {d} wide, expected {}",
                self.config.edge_dim()
            )));
        }
        let extra = match (&self.extra, extra) {
            (None, None) => None,
            (Some(layer), Some(v)) => {
                if v.dims() != [self.config.extra_dim] {
                    return Err(Error::Shape(format!(
                        "frame feature must be [{}], got {:?}",
                        self.config.extra_dim,
                        v.dims()
                    )));
                }
                Some((layer, v))
            }
            (None, Some(_)) => return Err(Error::invalid("edge mode NONE takes no frame feature")),
            (Some(_), None) => {
                return Err(Error::invalid(format!(
                    "edge mode {} needs a frame feature",
                    self.config.edge_mode.name()
                )))
            }
        };
        if e == 0 {
            return Ok(Tensor::zeros(
                (0, self.config.classes),
                ef.dtype(),
                ef.device(),
            )?);
        }
        let mut hidden = self.readout.forward(ef)?;
        if let Some((layer, v)) = extra {
            hidden = hidden.broadcast_add(&layer.forward(&v.unsqueeze(0)?)?)?;
        }
        let logits = self.out.forward(&hidden.relu()?)?;
        ensure_finite(&logits, "interaction logits")?;
        Ok(logits)
    }
}

/// Targets as an E×13 float tensor.
pub fn targets_tensor(targets: &[[u8; NUM_INTERACTIONS]], dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(targets.len() * NUM_INTERACTIONS);
    for (e, t) in targets.iter().enumerate() {
        for &x in t {
            if x > 1 {
                return Err(Error::invalid(format!(
                    "edge {e} has non-binary target {x}"
                )));
            }
            v.push(x as f64);
        }
    }
    Ok(Tensor::from_vec(v, (targets.len(), NUM_INTERACTIONS), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean binary cross-entropy with logits over all E×13 entries; zero for an
/// edgeless batch.
pub fn sg_loss(logits: &Tensor, targets: &[[u8; NUM_INTERACTIONS]]) -> Result<Tensor> {
    let (e, k) = logits.dims2()?;
    if e != targets.len() || k != NUM_INTERACTIONS {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} target vectors of width {NUM_INTERACTIONS}",
            logits.dims(),
            targets.len()
        )));
    }
    let t = targets_tensor(targets, logits.dtype())?;
    if e == 0 {
        log::warn!("interaction loss over zero edges is defined as 0");
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    // max(x, 0) − x·t + ln(1 + e^{−|x|})
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let l = ((logits.relu()? - (logits * t)?)? + softplus)?;
    Ok(l.mean_all()?)
}

pub fn sigmoid(logits: &Tensor) -> Result<Tensor> {
    Ok((logits.neg()?.exp()? + 1.0)?.recip()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgMetrics {
    /// Fraction of edges whose top-scoring class is a positive one.
    pub acc: f64,
    /// Mean average precision over classes with at least one positive.
    pub map: f64,
    /// Macro recall at threshold 0.5 over classes with at least one positive.
    pub recall: f64,
    /// Fraction of edges whose thresholded vector equals the target.
    pub exact_match: f64,
    pub edges: usize,
}

/// Average precision of one class: precision at every positive, in order of
/// decreasing score (ties keep input order). `None` without positives.
pub fn average_precision(scores: &[f64], targets: &[u8]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn sg_metrics(
    scores: &[[f64; NUM_INTERACTIONS]],
    targets: &[[u8; NUM_INTERACTIONS]],
) -> Result<SgMetrics> {
    if scores.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} score rows but {} target rows",
            scores.len(),
            targets.len()
        )));
    }
    let e = scores.len();
    let mut correct = 0usize;
    let mut exact = 0usize;
    for (s, t) in scores.iter().zip(targets) {
        let mut best = 0;
        for c in 1..NUM_INTERACTIONS {
            if s[c] > s[best] {
                best = c;
            }
        }
        correct += (t[best] == 1) as usize;
        exact += s.iter().zip(t).all(|(&p, &y)| (p >= 0.5) == (y == 1)) as usize;
    }
    let mut aps = Vec::new();
    let mut recalls = Vec::new();
    for c in 0..NUM_INTERACTIONS {
        let col: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        let tc: Vec<u8> = targets.iter().map(|t| t[c]).collect();
        if let Some(ap) = average_precision(&col, &tc) {
            aps.push(ap);
            let pos = tc.iter().filter(|&&y| y == 1).count();
            let tp = col
                .iter()
                .zip(&tc)
                .filter(|(&p, &y)| y == 1 && p >= 0.5)
                .count();
            recalls.push(tp as f64 / pos as f64);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let frac = |n: usize| if e == 0 { 0.0 } else { n as f64 / e as f64 };
    Ok(SgMetrics {
        acc: frac(correct),
        map: mean(&aps),
        recall: mean(&recalls),
        exact_match: frac(exact),
        edges: e,
    })
}

/// Rows of an E×13 probability tensor.
pub fn score_rows(probs: &Tensor) -> Result<Vec<[f64; NUM_INTERACTIONS]>> {
    let v = probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    v.into_iter()
        .map(|r| {
            r.try_into()
                .map_err(|r: Vec<f64>| Error::Shape(format!("score row has {} entries", r.len())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use candle_core::Var;
    use rand::Rng;

    use super::*;
    use crate::params::ParamStore;

    pub(crate) fn small_config(mode: EdgeMode) -> SceneGraphConfig {
        SceneGraphConfig {
            visual_dim: 6,
            semantic_dim: 4,
            fused_dim: 5,
            hidden: 7,
            classes: NUM_INTERACTIONS,
            edge_mode: mode,
            extra_dim: 3,
            penultimate_dim: 4,
            trainable_semantics: false,
        }
    }

    fn head(mode: EdgeMode, seed: u64) -> (ParamStore, SceneGraphHead) {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = SceneGraphHead::new(&mut Init::new(&mut store, &mut rng, ""), small_config(mode))
            .unwrap();
        (store, h)
    }

    fn annotation(instruments: usize) -> Annotation {
        let mut boxes = vec![NormBox::new(0.2, 0.3, 0.7, 0.8)];
        let mut semantics = vec![0];
        let mut edges = vec![];
        let mut targets = vec![];
        for i in 0..instruments {
            let o = 0.1 * i as f64;
            boxes.push(NormBox::new(0.05 + o, 0.1, 0.3 + o, 0.5 + o));
            semantics.push(1 + i as u8);
            edges.push([0, i + 1]);
            let mut t = [0u8; NUM_INTERACTIONS];
            t[i % NUM_INTERACTIONS] = 1;
            targets.push(t);
        }
        Annotation {
            boxes,
            semantics,
            edges,
            targets,
        }
    }

    fn randn(shape: (usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..shape.0 * shape.1)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn elu(x: f64) -> f64 {
        if x > 0.0 {
            x
        } else {
            x.exp_m1()
        }
    }

    #[test]
    fn single_node_attends_to_itself() -> Result<()> {
        let (store, h) = head(EdgeMode::None, 1);
        let x = randn((1, 6), 2);
        let (out, alpha) = h.visual_attention().attend(&x, &neighborhoods(1, &[]))?;
        assert_eq!(alpha.to_vec2::<f64>()?, vec![vec![1.0]]);
        let w = store
            .get("sg.visual_gat.w.weight")
            .unwrap()
            .to_vec2::<f64>()?;
        let xv = x.to_vec2::<f64>()?;
        let got = out.to_vec2::<f64>()?;
        for i in 0..6 {
            let want = elu((0..6).map(|j| w[i][j] * xv[0][j]).sum());
            assert!((got[0][i] - want).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn attention_matches_double_loop_oracle() -> Result<()> {
        let (store, h) = head(EdgeMode::None, 3);
        let x = randn((3, 6), 4);
        let edges = [[0, 2]];
        let adj = neighborhoods(3, &edges);
        let (out, alpha) = h.visual_attention().attend(&x, &adj)?;
        let w = store
            .get("sg.visual_gat.w.weight")
            .unwrap()
            .to_vec2::<f64>()?;
        let a1 = store
            .get("sg.visual_gat.a_src")
            .unwrap()
            .flatten_all()?
            .to_vec1::<f64>()?;
        let a2 = store
            .get("sg.visual_gat.a_dst")
            .unwrap()
            .flatten_all()?
            .to_vec1::<f64>()?;
        let xv = x.to_vec2::<f64>()?;
        let wh: Vec<Vec<f64>> = xv
            .iter()
            .map(|r| {
                (0..6)
                    .map(|i| (0..6).map(|j| w[i][j] * r[j]).sum())
                    .collect()
            })
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let got = out.to_vec2::<f64>()?;
        let got_alpha = alpha.to_vec2::<f64>()?;
        for i in 0..3 {
            let nbrs: Vec<usize> = (0..3).filter(|&j| adj[i][j]).collect();
            let e: Vec<f64> = nbrs
                .iter()
                .map(|&j| {
                    let z = dot(&a1, &wh[i]) + dot(&a2, &wh[j]);
                    if z > 0.0 {
                        z
                    } else {
                        0.2 * z
                    }
                })
                .collect();
            let z: f64 = e.iter().map(|v| v.exp()).sum();
            let mut row_sum = 0.0;
            for d in 0..6 {
                let s: f64 = nbrs
                    .iter()
                    .zip(&e)
                    .map(|(&j, &ej)| ej.exp() / z * wh[j][d])
                    .sum();
                assert!((got[i][d] - elu(s)).abs() < 1e-9);
            }
            for j in 0..3 {
                row_sum += got_alpha[i][j];
                if !adj[i][j] {
                    assert_eq!(got_alpha[i][j], 0.0);
                }
            }
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn annotation_rules() {
        let mut a = annotation(2);
        assert!(a.validate().is_ok());
        a.semantics[1] = 0;
        assert!(a
            .validate()
            .unwrap_err()
            .to_string()
            .contains("two tissue nodes"));
        let mut a = annotation(1);
        a.semantics[0] = 3;
        assert!(a
            .validate()
            .unwrap_err()
            .to_string()
            .contains("no tissue node"));
        let mut a = annotation(2);
        a.targets[0][4] = 2;
        assert!(a.validate().is_err());
        let mut a = annotation(2);
        a.edges[1] = [0, 1];
        assert!(a.validate().is_err());
    }

    #[test]
    fn tissue_only_frame_is_edgeless() -> Result<()> {
        let (_, h) = head(EdgeMode::Gisf, 5);
        let a = annotation(0);
        let g = h.graphs(&randn((1, 6), 6), &a)?;
        assert_eq!(g.num_edges(), 0);
        let logits = h.edge_readout(&g, Some(&Tensor::zeros(3, DType::F64, &Device::Cpu)?))?;
        assert_eq!(logits.dims(), &[0, 13]);
        assert_eq!(sg_loss(&logits, &[])?.to_scalar::<f64>()?, 0.0);
        Ok(())
    }

    #[test]
    fn zero_extra_slice_reproduces_edge_mode_none() -> Result<()> {
        let (_, plain) = head(EdgeMode::None, 7);
        let (store, gisf) = head(EdgeMode::Gisf, 7);
        let a = annotation(2);
        let x = randn((3, 6), 8);
        let g0 = plain.graphs(&x, &a)?;
        let g1 = gisf.graphs(&x, &a)?;
        let base = plain.edge_readout(&g0, None)?.to_vec2::<f64>()?;

        let v = randn((1, 3), 9).squeeze(0)?;
        let differs = gisf.edge_readout(&g1, Some(&v))?.to_vec2::<f64>()?;
        assert_ne!(base, differs);

        let zero = Tensor::zeros(3, DType::F64, &Device::Cpu)?;
        assert_eq!(base, gisf.edge_readout(&g1, Some(&zero))?.to_vec2::<f64>()?);
        let w = store.get("sg.readout_extra.weight").unwrap();
        w.set(&w.zeros_like()?)?;
        assert_eq!(base, gisf.edge_readout(&g1, Some(&v))?.to_vec2::<f64>()?);
        Ok(())
    }

    #[test]
    fn mode_and_extra_must_agree() -> Result<()> {
        let (_, plain) = head(EdgeMode::None, 10);
        let (_, gisf) = head(EdgeMode::Gisf, 10);
        let a = annotation(1);
        let g = plain.graphs(&randn((2, 6), 1), &a)?;
        let v = Tensor::zeros(3, DType::F64, &Device::Cpu)?;
        assert!(plain.edge_readout(&g, Some(&v)).is_err());
        assert!(gisf.edge_readout(&g, None).is_err());
        assert!(gisf
            .edge_readout(&g, Some(&Tensor::zeros(4, DType::F64, &Device::Cpu)?))
            .is_err());
        Ok(())
    }

    #[test]
    fn readout_is_the_affine_chain() -> Result<()> {
        let (store, h) = head(EdgeMode::Gisf, 11);
        let a = annotation(1);
        let g = h.graphs(&randn((2, 6), 12), &a)?;
        let v = randn((1, 3), 13).squeeze(0)?;
        let got = h.edge_readout(&g, Some(&v))?.to_vec2::<f64>()?;
        let ef = g.edge_features.to_vec2::<f64>()?[0].clone();
        let get2 = |n: &str| store.get(n).unwrap().to_vec2::<f64>().unwrap();
        let get1 = |n: &str| store.get(n).unwrap().to_vec1::<f64>().unwrap();
        let (w1, b1, wx, w2, b2) = (
            get2("sg.readout.weight"),
            get1("sg.readout.bias"),
            get2("sg.readout_extra.weight"),
            get2("sg.out.weight"),
            get1("sg.out.bias"),
        );
        let vv = v.to_vec1::<f64>()?;
        let hidden: Vec<f64> = (0..7)
            .map(|i| {
                let z = b1[i]
                    + ef.iter().zip(&w1[i]).map(|(x, w)| x * w).sum::<f64>()
                    + vv.iter().zip(&wx[i]).map(|(x, w)| x * w).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        for c in 0..13 {
            let want = b2[c] + hidden.iter().zip(&w2[c]).map(|(x, w)| x * w).sum::<f64>();
            assert!((got[0][c] - want).abs() < 1e-12);
        }
        Ok(())
    }

    #[test]
    fn permuting_instruments_permutes_edges() -> Result<()> {
        let (_, h) = head(EdgeMode::Gisf, 14);
        let a = annotation(3);
        let x = randn((4, 6), 15);
        let v = randn((1, 3), 16).squeeze(0)?;
        let logits = h
            .edge_readout(&h.graphs(&x, &a)?, Some(&v))?
            .to_vec2::<f64>()?;

        // node order [0, 3, 1, 2]; edges listed in reverse
        let perm = [0usize, 3, 1, 2];
        let inv = |old: usize| perm.iter().position(|&p| p == old).unwrap();
        let b = Annotation {
            boxes: perm.iter().map(|&p| a.boxes[p]).collect(),
            semantics: perm.iter().map(|&p| a.semantics[p]).collect(),
            edges: a
                .edges
                .iter()
                .rev()
                .map(|e| [inv(e[0]), inv(e[1])])
                .collect(),
            targets: a.targets.iter().rev().copied().collect(),
        };
        let idx = Tensor::from_vec(
            perm.iter().map(|&p| p as u32).collect::<Vec<_>>(),
            4,
            &Device::Cpu,
        )?;
        let xp = x.index_select(&idx, 0)?;
        let permuted = h
            .edge_readout(&h.graphs(&xp, &b)?, Some(&v))?
            .to_vec2::<f64>()?;
        for (e, row) in logits.iter().enumerate() {
            let other = &permuted[logits.len() - 1 - e];
            for (p, q) in row.iter().zip(other) {
                assert!((p - q).abs() < 1e-12);
            }
        }
        Ok(())
    }

    #[test]
    fn bce_closed_forms() -> Result<()> {
        let mut t = [[0u8; 13]; 3];
        t[0][2] = 1;
        t[2][12] = 1;
        let zero = Tensor::zeros((3, 13), DType::F64, &Device::Cpu)?;
        assert!((sg_loss(&zero, &t)?.to_scalar::<f64>()? - 2f64.ln()).abs() < 1e-12);
        let sure = targets_tensor(&t, DType::F64)?.affine(1600.0, -800.0)?;
        assert!(sg_loss(&sure, &t)?.to_scalar::<f64>()? < 1e-12);
        t[1][0] = 3;
        assert!(sg_loss(&zero, &t).is_err());
        Ok(())
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target() -> Result<()> {
        let x = Var::from_tensor(&randn((2, 13), 17))?;
        let mut t = [[0u8; 13]; 2];
        t[1][5] = 1;
        let g = sg_loss(x.as_tensor(), &t)?
            .backward()?
            .remove(x.as_tensor())
            .unwrap();
        let want = ((sigmoid(x.as_tensor())? - targets_tensor(&t, DType::F64)?)? / 26.0)?;
        let d = (g - want)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(d < 1e-12);
        Ok(())
    }

    #[test]
    fn worked_average_precision() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.1, 0.2], &[0, 0]), None);
    }

    #[test]
    fn perfect_scores_are_perfect() -> Result<()> {
        let mut t = [[0u8; 13]; 4];
        let mut s = [[0f64; 13]; 4];
        for (i, c) in [0usize, 3, 3, 2].iter().enumerate() {
            t[i][*c] = 1;
            s[i][*c] = 1.0;
        }
        t[1][5] = 1;
        s[1][5] = 1.0;
        let m = sg_metrics(&s, &t)?;
        assert_eq!(
            (m.acc, m.map, m.recall, m.exact_match),
            (1.0, 1.0, 1.0, 1.0)
        );
        Ok(())
    }

    #[test]
    fn classes_without_positives_are_excluded() -> Result<()> {
        let mut t = [[0u8; 13]; 2];
        t[0][1] = 1;
        t[1][1] = 1;
        let mut s = [[0.9f64; 13]; 2];
        s[0][1] = 0.95;
        s[1][1] = 0.95;
        // twelve classes have no positives; only class 1 counts
        let m = sg_metrics(&s, &t)?;
        assert_eq!(m.map, 1.0);
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.exact_match, 0.0);
        Ok(())
    }

    #[test]
    fn spatial_feature_layout() {
        let t = NormBox::new(0.0, 0.0, 0.5, 0.5);
        let i = NormBox::new(0.5, 0.25, 1.0, 0.5);
        let f = spatial_feature(&t, &i);
        assert_eq!(&f[..8], &[0.0, 0.0, 0.5, 0.5, 0.5, 0.25, 1.0, 0.5]);
        assert_eq!((f[8], f[9]), (0.5, 0.125));
        assert_eq!(f[10], 0.0);
        assert!((f[11] - 0.5f64.ln()).abs() < 1e-15);
    }
}
