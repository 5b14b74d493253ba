//! Pretraining augmentations: node random sampling and contiguous temporal
//! masking, composed with the graph mask into a [`MaskedSample`].

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::graphs::{mask_and_normalize, CorrelationGraph, MaskMode, MaskedGraph};

/// Derives an independent stream seed from `seed` and a tag (splitmix64).
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A window and its graph restricted to a random node subset.
#[derive(Clone, Debug)]
pub struct SubSample {
    /// Indices into the original node order.
    pub nodes: Vec<usize>,
    pub window: WindowSample,
    pub graph: CorrelationGraph,
}

/// Uniform subset of `n_sub` nodes without replacement, in random order.
pub fn sample_nodes(window: &WindowSample, graph: &CorrelationGraph, n_sub: usize, seed: u64) -> Result<SubSample> {
    let n = window.n_nodes();
    if graph.n_nodes() != n {
        return Err(Error::invalid(format!(
            "window has {n} nodes but the graph has {}",
            graph.n_nodes()
        )));
    }
    if n_sub < 2 || n_sub > n {
        return Err(Error::invalid(format!("n_sub must be in 2..={n}, got {n_sub}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = index::sample(&mut rng, n, n_sub).into_vec();
    nodes.shuffle(&mut rng);
    Ok(SubSample {
        window: window.select_nodes(&nodes),
        graph: graph.restrict(&nodes),
        nodes,
    })
}

/// How temporal mask spans are placed across nodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanMode {
    /// Every node draws its own start.
    PerNode,
    /// One start shared by all nodes.
    Shared,
}

impl SpanMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "per_node" => Some(SpanMode::PerNode),
            "shared" => Some(SpanMode::Shared),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpanMode::PerNode => "per_node",
            SpanMode::Shared => "shared",
        }
    }
}

/// Window values with one contiguous masked span per node.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedPanel {
    pub n: usize,
    pub t: usize,
    pub f: usize,
    /// N×T×F with masked positions set to 0.
    pub values: Vec<f64>,
    /// N×T, true where masked.
    pub mask_positions: Vec<bool>,
    pub span_starts: Vec<usize>,
    pub span_len: usize,
    pub mask_rate: f64,
}

/// Masks `L = ⌊r_t·T⌋` consecutive steps per node, starting uniformly in
/// `[0, T−L]`.
pub fn mask_temporal(window: &WindowSample, r_t: f64, mode: SpanMode, seed: u64) -> Result<MaskedPanel> {
    if !(0.0..1.0).contains(&r_t) {
        return Err(Error::invalid(format!("temporal mask rate must be in [0, 1), got {r_t}")));
    }
    let (n, t, f) = (window.n_nodes(), window.t, window.f);
    let len = (r_t * t as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = rng.random_range(0..=t - len);
    let span_starts: Vec<usize> = (0..n)
        .map(|_| match mode {
            SpanMode::PerNode => rng.random_range(0..=t - len),
            SpanMode::Shared => shared,
        })
        .collect();
    let mut values = window.values.clone();
    let mut mask_positions = vec![false; n * t];
    for (i, &s) in span_starts.iter().enumerate() {
        for step in s..s + len {
            mask_positions[i * t + step] = true;
            values[(i * t + step) * f..(i * t + step + 1) * f].fill(0.0);
        }
    }
    Ok(MaskedPanel {
        n,
        t,
        f,
        values,
        mask_positions,
        span_starts,
        span_len: len,
        mask_rate: r_t,
    })
}

/// One pretraining input: masked panel, masked graph and the originals.
#[derive(Clone, Debug)]
pub struct MaskedSample {
    pub panel: MaskedPanel,
    pub graph: MaskedGraph,
    /// Unmasked N×T×F values.
    pub original: Vec<f64>,
    pub node_ids: Vec<String>,
}

/// Augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Nodes per sub-sample; 0 keeps every node in its original order.
    pub n_sub: usize,
    pub r_t: f64,
    pub r_g: f64,
    pub span_mode: SpanMode,
    pub mask_mode: MaskMode,
}

/// Node sampling, temporal masking and graph masking with seeds derived from
/// `seed`.
pub fn augment(window: &WindowSample, graph: &CorrelationGraph, cfg: &AugmentConfig, seed: u64) -> Result<MaskedSample> {
    let (window, graph) = if cfg.n_sub == 0 {
        (window.clone(), graph.clone())
    } else {
        let sub = sample_nodes(window, graph, cfg.n_sub, mix_seed(seed, 1))?;
        (sub.window, sub.graph)
    };
    let panel = mask_temporal(&window, cfg.r_t, cfg.span_mode, mix_seed(seed, 2))?;
    let graph = mask_and_normalize(&graph, cfg.r_g, cfg.mask_mode, mix_seed(seed, 3))?;
    Ok(MaskedSample {
        panel,
        graph,
        original: window.values,
        node_ids: window.node_ids,
    })
}

/// The complete, unmasked view of a window used for fine-tuning and
/// prediction.
pub fn unmasked(window: &WindowSample, graph: &CorrelationGraph) -> Result<MaskedSample> {
    if graph.node_ids != window.node_ids {
        return Err(Error::invalid("graph and window node sets differ"));
    }
    let cfg = AugmentConfig {
        n_sub: 0,
        r_t: 0.0,
        r_g: 0.0,
        span_mode: SpanMode::PerNode,
        mask_mode: MaskMode::Edge,
    };
    augment(window, graph, &cfg, 0)
}
