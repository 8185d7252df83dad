//! Shared-specific encoder/decoder.
//!
//! Every modality goes through the shared encoder and through its own specific
//! encoder. A pointwise compositional block fuses the two into one feature per
//! modality. A combination feature `Z` concatenates one block per modality
//! slot: the fused feature for present modalities, the shared feature for
//! missing ones. All `Z` have the same shape, so one decoder serves every
//! combination.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{CcsdError, Result};
use crate::lattice::{enumerate_combos, ModalityCombo};
use crate::tensor::{softmax_channels, Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Network hyper-parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_modalities: usize,
    /// 2 or 3.
    pub spatial_rank: usize,
    /// Per-axis voxel counts, `spatial_rank` entries.
    pub input_size: Vec<usize>,
    pub base_channels: usize,
    /// Number of encoder resolution levels.
    pub depth: usize,
    pub n_classes: usize,
    pub feature_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_modalities: 4,
            spatial_rank: 3,
            input_size: vec![32, 32, 32],
            base_channels: 8,
            depth: 3,
            n_classes: 4,
            feature_channels: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CcsdError::invalid(m));
        if self.n_modalities < 1 || self.n_modalities > crate::lattice::MAX_MODALITIES {
            return bad(format!("n_modalities={} out of range", self.n_modalities));
        }
        if self.spatial_rank != 2 && self.spatial_rank != 3 {
            return bad(format!("spatial_rank must be 2 or 3, got {}", self.spatial_rank));
        }
        if self.input_size.len() != self.spatial_rank {
            return bad(format!(
                "input_size has {} axes but spatial_rank is {}",
                self.input_size.len(),
                self.spatial_rank
            ));
        }
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        let div = 1usize << (self.depth - 1);
        if self.input_size.iter().any(|&s| s == 0 || s % div != 0) {
            return bad(format!(
                "input_size {:?} not divisible by 2^(depth-1) = {div}",
                self.input_size
            ));
        }
        if self.n_classes < 2 || self.n_classes > 255 {
            return bad(format!("n_classes={} out of range [2, 255]", self.n_classes));
        }
        if self.base_channels < 4 {
            return bad(format!("base_channels={} below 4", self.base_channels));
        }
        if self.feature_channels < 1 {
            return bad("feature_channels must be positive".into());
        }
        Ok(())
    }

    /// Input extent as `[d, h, w]` (`d = 1` in 2-d).
    pub fn dims(&self) -> [usize; 3] {
        match self.spatial_rank {
            2 => [1, self.input_size[0], self.input_size[1]],
            _ => [self.input_size[0], self.input_size[1], self.input_size[2]],
        }
    }

    /// Spatial extent of the encoder output.
    pub fn feature_dims(&self) -> [usize; 3] {
        let f = self.pool_factor();
        let mut d = self.dims();
        for _ in 1..self.depth {
            for a in 0..3 {
                d[a] /= f[a];
            }
        }
        d
    }

    fn pool_factor(&self) -> [usize; 3] {
        if self.spatial_rank == 2 {
            [1, 2, 2]
        } else {
            [2, 2, 2]
        }
    }

    fn kernel(&self, size: usize) -> [usize; 3] {
        if self.spatial_rank == 2 {
            [1, size, size]
        } else {
            [size, size, size]
        }
    }

    fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Channels of an assembled combination feature.
    pub fn z_channels(&self) -> usize {
        self.n_modalities * self.feature_channels
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm: Option<(ParamId, ParamId)>,
    activate: bool,
}

#[derive(Debug, Clone)]
struct Encoder {
    levels: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
struct Decoder {
    levels: Vec<ConvBlock>,
    head: ConvBlock,
}

/// Call counters for the encoders and decoder.
#[derive(Debug, Default)]
pub struct CallCounters {
    shared: AtomicUsize,
    specific: AtomicUsize,
    fusion: AtomicUsize,
    decoder: AtomicUsize,
    absent: AtomicUsize,
}

/// Snapshot of [`CallCounters`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CallCounts {
    /// Per-modality evaluations of the shared encoder.
    pub shared: usize,
    /// Evaluations of any specific encoder.
    pub specific: usize,
    pub fusion: usize,
    pub decoder: usize,
    /// Shared-encoder evaluations of an all-zero volume.
    pub absent: usize,
}

impl CallCounters {
    fn bump(counter: &AtomicUsize) {
        counter.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            shared: self.shared.load(Ordering::Relaxed),
            specific: self.specific.load(Ordering::Relaxed),
            fusion: self.fusion.load(Ordering::Relaxed),
            decoder: self.decoder.load(Ordering::Relaxed),
            absent: self.absent.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        for c in [&self.shared, &self.specific, &self.fusion, &self.decoder, &self.absent] {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Per-modality features of one forward pass, as graph handles.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub shared: Vec<Var>,
    pub specific: Vec<Var>,
    pub fused: Vec<Var>,
    /// Shared feature of an all-zero volume. When set it fills every missing
    /// slot; when `None` missing slots use `shared[j]`, which is the same
    /// thing for features computed from masked inputs.
    pub absent: Option<Var>,
}

/// Which per-modality feature represents a present modality when building
/// distillation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    Shared,
    Specific,
    Fused,
}

impl Carrier {
    pub const ALL: [Carrier; 3] = [Carrier::Shared, Carrier::Specific, Carrier::Fused];

    pub fn name(self) -> &'static str {
        match self {
            Carrier::Shared => "shared",
            Carrier::Specific => "specific",
            Carrier::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Carrier::Shared),
            "specific" => Ok(Carrier::Specific),
            "fused" => Ok(Carrier::Fused),
            _ => Err(CcsdError::invalid(format!(
                "unknown carrier {s:?} (expected shared, specific or fused)"
            ))),
        }
    }
}

/// Assembled `Z` for every non-empty combination, in canonical lattice order.
#[derive(Debug, Clone)]
pub struct ComboFeatureCache {
    entries: Vec<(ModalityCombo, Var)>,
}

impl ComboFeatureCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, combo: ModalityCombo) -> Option<Var> {
        self.entries.iter().find(|(c, _)| *c == combo).map(|&(_, v)| v)
    }

    pub fn combos(&self) -> impl Iterator<Item = ModalityCombo> + '_ {
        self.entries.iter().map(|(c, _)| *c)
    }

    pub fn entries(&self) -> &[(ModalityCombo, Var)] {
        &self.entries
    }
}

/// Decoder output for one combination.
#[derive(Debug, Clone)]
pub struct SegOutput<T> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

impl<T: Scalar> SegOutput<T> {
    pub fn from_logits(logits: Tensor<T>) -> Self {
        let probabilities = softmax_channels(&logits, T::one());
        Self {
            logits,
            probabilities,
        }
    }

    /// Per-voxel predicted label, shape `[B * voxels]`.
    pub fn labels(&self) -> Vec<u8> {
        crate::tensor::argmax_channels(&self.logits)
    }
}

/// Zeroes the volumes of modalities outside `combo`. Each volume is
/// `[B, 1, d, h, w]`.
pub fn mask_inputs<T: Scalar>(inputs: &[Tensor<T>], combo: ModalityCombo) -> Result<Vec<Tensor<T>>> {
    if combo.min_modalities() > inputs.len() {
        return Err(CcsdError::invalid(format!(
            "combination {combo} refers to modalities beyond the {} inputs",
            inputs.len()
        )));
    }
    Ok(inputs
        .iter()
        .enumerate()
        .map(|(j, x)| {
            if combo.contains(j) {
                x.clone()
            } else {
                Tensor::zeros(x.shape())
            }
        })
        .collect())
}

/// The shared-specific network with its parameters.
#[derive(Debug)]
pub struct SsNet<T> {
    cfg: NetConfig,
    params: ParamStore<T>,
    shared: Encoder,
    specific: Vec<Encoder>,
    fusion: ConvBlock,
    decoder: Decoder,
    counters: CallCounters,
}

impl<T: Scalar> Clone for SsNet<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            shared: self.shared.clone(),
            specific: self.specific.clone(),
            fusion: self.fusion,
            decoder: self.decoder.clone(),
            counters: CallCounters::default(),
        }
    }
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn block(&mut self, name: &str, cin: usize, cout: usize, kernel: [usize; 3], norm: bool, activate: bool) -> ConvBlock {
        let fan_in = cin * kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::of(self.rng.random_range(-bound..bound)))
                .collect()
        };
        let w = Tensor::from_vec([cout, cin, kernel[0], kernel[1], kernel[2]], uniform(cout * fan_in))
            .expect("sized");
        let b = Tensor::from_vec([1, cout, 1, 1, 1], uniform(cout)).expect("sized");
        let weight = self.params.add(format!("{name}.weight"), w);
        let bias = self.params.add(format!("{name}.bias"), b);
        let norm = norm.then(|| {
            let g = self.params.add(format!("{name}.norm.gamma"), Tensor::full([1, cout, 1, 1, 1], T::one()));
            let be = self.params.add(format!("{name}.norm.beta"), Tensor::zeros([1, cout, 1, 1, 1]));
            (g, be)
        });
        ConvBlock {
            weight,
            bias,
            norm,
            activate,
        }
    }

    fn encoder(&mut self, name: &str, cfg: &NetConfig) -> Encoder {
        let k = cfg.kernel(3);
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut cin = 1;
        for l in 0..cfg.depth {
            let cout = if l + 1 == cfg.depth {
                cfg.feature_channels
            } else {
                cfg.level_channels(l)
            };
            levels.push(self.block(&format!("{name}.level{l}"), cin, cout, k, true, true));
            cin = cout;
        }
        Encoder { levels }
    }

    fn decoder(&mut self, cfg: &NetConfig) -> Decoder {
        let k = cfg.kernel(3);
        let mut levels = Vec::with_capacity(cfg.depth);
        let mut cur = cfg.level_channels(cfg.depth.saturating_sub(2));
        levels.push(self.block("decoder.bottom", cfg.z_channels(), cur, k, true, true));
        for l in (0..cfg.depth - 1).rev() {
            let cout = cfg.level_channels(l.saturating_sub(1));
            levels.push(self.block(&format!("decoder.level{l}"), cur, cout, k, true, true));
            cur = cout;
        }
        let head = self.block("decoder.head", cur, cfg.n_classes, [1, 1, 1], false, false);
        Decoder { levels, head }
    }
}

impl<T: Scalar> SsNet<T> {
    /// Randomly initialized network (fan-in scaled uniform weights).
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let shared = b.encoder("shared", &cfg);
        let specific = (0..cfg.n_modalities)
            .map(|j| b.encoder(&format!("specific{}", j + 1), &cfg))
            .collect();
        let fc = cfg.feature_channels;
        let fusion = b.block("fusion", 2 * fc, fc, [1, 1, 1], true, true);
        let decoder = b.decoder(&cfg);
        Ok(Self {
            cfg,
            params,
            shared,
            specific,
            fusion,
            decoder,
            counters: CallCounters::default(),
        })
    }

    /// Rebuilds a network around stored parameters; names and shapes must match.
    pub fn with_params(cfg: NetConfig, params: ParamStore<T>) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        if net.params.len() != params.len() {
            return Err(CcsdError::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                net.params.len(),
                params.len()
            )));
        }
        for id in net.params.ids() {
            if net.params.name(id) != params.name(id) || net.params.get(id).shape() != params.get(id).shape() {
                return Err(CcsdError::Incompatible(format!(
                    "parameter {} ({:?}) does not match stored {} ({:?})",
                    net.params.name(id),
                    net.params.get(id).shape(),
                    params.name(id),
                    params.get(id).shape()
                )));
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn counters(&self) -> &CallCounters {
        &self.counters
    }

    /// Expected shape of one modality volume for batch size `batch`.
    pub fn input_shape(&self, batch: usize) -> [usize; 5] {
        let [d, h, w] = self.cfg.dims();
        [batch, 1, d, h, w]
    }

    fn apply_block(&self, g: &mut Graph<T>, block: &ConvBlock, x: Var) -> Result<Var> {
        let mut y = g.conv(x, g.param(block.weight), g.param(block.bias))?;
        if let Some((gamma, beta)) = block.norm {
            y = g.instance_norm(y, g.param(gamma), g.param(beta));
        }
        if block.activate {
            y = g.leaky_relu(y, T::of(LEAKY_SLOPE));
        }
        Ok(y)
    }

    fn run_encoder(&self, g: &mut Graph<T>, enc: &Encoder, x: Var) -> Result<Var> {
        let mut h = x;
        for (l, block) in enc.levels.iter().enumerate() {
            if l > 0 {
                h = g.max_pool(h, self.cfg.pool_factor())?;
            }
            h = self.apply_block(g, block, h)?;
        }
        Ok(h)
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.value(x).shape();
        let expected = self.input_shape(shape[0]);
        if shape != expected {
            return Err(CcsdError::ShapeMismatch {
                expected: expected.to_vec(),
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// Shared encoder applied to one modality volume.
    pub fn encode_shared(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        CallCounters::bump(&self.counters.shared);
        self.run_encoder(g, &self.shared, x)
    }

    /// Specific encoder of `modality` applied to its volume.
    pub fn encode_specific(&self, g: &mut Graph<T>, modality: usize, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let enc = self
            .specific
            .get(modality)
            .ok_or_else(|| CcsdError::invalid(format!("no specific encoder for modality {modality}")))?;
        CallCounters::bump(&self.counters.specific);
        self.run_encoder(g, enc, x)
    }

    /// Shared encoder applied to an all-zero volume, the stand-in for a
    /// missing modality after masking.
    pub fn encode_absent(&self, g: &mut Graph<T>, batch: usize) -> Result<Var> {
        let x = g.input(Tensor::zeros(self.input_shape(batch)));
        CallCounters::bump(&self.counters.absent);
        self.run_encoder(g, &self.shared, x)
    }

    /// Compositional layer: channel concat of (shared, specific), pointwise conv block.
    pub fn fuse(&self, g: &mut Graph<T>, shared: Var, specific: Var) -> Result<Var> {
        CallCounters::bump(&self.counters.fusion);
        let cat = g.concat(&[shared, specific])?;
        self.apply_block(g, &self.fusion, cat)
    }

    /// Runs every encoder once per modality on (already masked) inputs.
    pub fn encode(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<ModalityFeatures> {
        if inputs.len() != self.cfg.n_modalities {
            return Err(CcsdError::ShapeMismatch {
                expected: vec![self.cfg.n_modalities],
                actual: vec![inputs.len()],
            });
        }
        let mut feats = ModalityFeatures {
            shared: Vec::with_capacity(inputs.len()),
            specific: Vec::with_capacity(inputs.len()),
            fused: Vec::with_capacity(inputs.len()),
            absent: None,
        };
        for (j, &x) in inputs.iter().enumerate() {
            let s = self.encode_shared(g, x)?;
            let p = self.encode_specific(g, j, x)?;
            let f = self.fuse(g, s, p)?;
            feats.shared.push(s);
            feats.specific.push(p);
            feats.fused.push(f);
        }
        Ok(feats)
    }

    /// `Z` for `combo`: fused block for present slots, shared block for missing.
    pub fn assemble_combo_feature(&self, g: &mut Graph<T>, combo: ModalityCombo, feats: &ModalityFeatures) -> Result<Var> {
        self.assemble_carrier(g, combo, feats, Carrier::Fused)
    }

    /// Distillation view of `combo` for a given carrier. With the fused
    /// carrier this is exactly `Z`. For the shared and specific carriers the
    /// present slots hold that feature and missing slots are zero.
    pub fn assemble_carrier(
        &self,
        g: &mut Graph<T>,
        combo: ModalityCombo,
        feats: &ModalityFeatures,
        carrier: Carrier,
    ) -> Result<Var> {
        let n = self.cfg.n_modalities;
        if combo.min_modalities() > n {
            return Err(CcsdError::invalid(format!("combination {combo} exceeds {n} modalities")));
        }
        let mut zero: Option<Var> = None;
        let mut slots = Vec::with_capacity(n);
        for j in 0..n {
            let v = match (combo.contains(j), carrier) {
                (true, Carrier::Fused) => feats.fused[j],
                (true, Carrier::Shared) => feats.shared[j],
                (true, Carrier::Specific) => feats.specific[j],
                (false, Carrier::Fused) => feats.absent.unwrap_or(feats.shared[j]),
                (false, _) => *zero.get_or_insert_with(|| {
                    let shape = g.value(feats.shared[j]).shape();
                    g.input(Tensor::zeros(shape))
                }),
            };
            slots.push(v);
        }
        g.concat(&slots)
    }

    /// Encodes the full-modality inputs once and assembles `Z` for all
    /// `2^N - 1` combinations from the cached per-modality features. Masking
    /// turns every missing volume into the same zero volume, so its shared
    /// feature is computed once and reused for every missing slot.
    pub fn forward_all_combos(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<(ModalityFeatures, ComboFeatureCache)> {
        let mut feats = self.encode(g, inputs)?;
        if self.cfg.n_modalities > 1 {
            let batch = g.value(inputs[0]).shape()[0];
            feats.absent = Some(self.encode_absent(g, batch)?);
        }
        let lattice = enumerate_combos(self.cfg.n_modalities)?;
        let mut entries = Vec::with_capacity(lattice.len());
        for &combo in &lattice {
            entries.push((combo, self.assemble_combo_feature(g, combo, &feats)?));
        }
        Ok((feats, ComboFeatureCache { entries }))
    }

    /// Shared decoder: `Z` -> class logits at input resolution.
    pub fn decode(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let shape = g.value(z).shape();
        let [d, h, w] = self.cfg.feature_dims();
        if shape[1..] != [self.cfg.z_channels(), d, h, w] {
            return Err(CcsdError::ShapeMismatch {
                expected: vec![shape[0], self.cfg.z_channels(), d, h, w],
                actual: shape.to_vec(),
            });
        }
        CallCounters::bump(&self.counters.decoder);
        let mut x = z;
        for (i, block) in self.decoder.levels.iter().enumerate() {
            if i > 0 {
                x = g.upsample(x, self.cfg.pool_factor());
            }
            x = self.apply_block(g, block, x)?;
        }
        self.apply_block(g, &self.decoder.head, x)
    }

    /// Decodes a standalone `Z` tensor.
    pub fn decode_tensor(&self, z: &Tensor<T>) -> Result<SegOutput<T>> {
        let mut g = Graph::new(&self.params);
        let zv = g.input(z.clone());
        let logits = self.decode(&mut g, zv)?;
        Ok(SegOutput::from_logits(g.value(logits).clone()))
    }

    /// Literal inference for one combination: mask, encode, assemble, decode.
    pub fn infer_combo(&self, inputs: &[Tensor<T>], combo: ModalityCombo) -> Result<SegOutput<T>> {
        let masked = mask_inputs(inputs, combo)?;
        let mut g = Graph::new(&self.params);
        let vars: Vec<Var> = masked.into_iter().map(|t| g.input(t)).collect();
        let feats = self.encode(&mut g, &vars)?;
        let z = self.assemble_combo_feature(&mut g, combo, &feats)?;
        let logits = self.decode(&mut g, z)?;
        Ok(SegOutput::from_logits(g.value(logits).clone()))
    }

    /// Inference for every combination. Each masked modality volume is either
    /// the original or all-zero and every encoder only sees its own volume, so
    /// the cached features of [`SsNet::forward_all_combos`] give exactly the
    /// results of [`SsNet::infer_combo`].
    pub fn infer_all_combos(&self, inputs: &[Tensor<T>]) -> Result<Vec<(ModalityCombo, SegOutput<T>)>> {
        let mut g = Graph::new(&self.params);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let (_, cache) = self.forward_all_combos(&mut g, &vars)?;
        let mut out = Vec::with_capacity(cache.len());
        for &(combo, z) in cache.entries() {
            let logits = self.decode(&mut g, z)?;
            out.push((combo, SegOutput::from_logits(g.value(logits).clone())));
        }
        Ok(out)
    }
}
