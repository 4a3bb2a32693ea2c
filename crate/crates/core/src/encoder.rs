//! Frozen observation encoders: patch tokenisation with 2x2 grouping, a
//! depth-based geometry encoder mixing over a per-episode frame cache,
//! additive fusion and strided history sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One rendered observation: `rgb` is `height x width x 3`, `depth` is
/// `height x width`, both row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub step_index: usize,
}

impl ObservationFrame {
    pub fn new(height: usize, width: usize, rgb: Vec<f64>, depth: Vec<f64>, step_index: usize) -> Result<Self> {
        if rgb.len() != height * width * 3 || depth.len() != height * width {
            return Err(Error::dim("observation", &[height, width, 3], &[rgb.len(), depth.len()]));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::format("observation", "depth must be finite and non-negative"));
        }
        Ok(Self {
            height,
            width,
            rgb,
            depth,
            step_index,
        })
    }

    pub fn rgb_at(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn depth_at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub dim: usize,
    /// Temporal sampling stride Δ in primitive steps.
    pub stride: usize,
    /// Maximum number of sampled frames, current frame included.
    pub window: usize,
    pub geometry_cache_limit: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 2,
            dim: 32,
            stride: 4,
            window: 12,
            geometry_cache_limit: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.dim == 0 || self.stride == 0 || self.window == 0 || self.geometry_cache_limit == 0
        {
            return Err(Error::Config(
                "patch_size, dim, stride, window and geometry_cache_limit must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Token grid side lengths for a frame of the given size.
    pub fn grid_shape(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let g = 2 * self.patch_size;
        if !height.is_multiple_of(g) || !width.is_multiple_of(g) || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "frame {height}x{width} not divisible by twice the patch size {}",
                self.patch_size
            )));
        }
        Ok((height / g, width / g))
    }
}

/// `rows x cols x channels` feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub tokens: Vec<f64>,
    pub source_step: usize,
    /// Linear downsampling factor relative to the encoder output.
    pub downsample_factor: usize,
}

impl TokenGrid {
    pub fn new(rows: usize, cols: usize, channels: usize, tokens: Vec<f64>, source_step: usize) -> Result<Self> {
        if tokens.len() != rows * cols * channels {
            return Err(Error::dim("token grid", &[rows, cols, channels], &[tokens.len()]));
        }
        Ok(Self {
            rows,
            cols,
            channels,
            tokens,
            source_step,
            downsample_factor: 1,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, r: usize, c: usize) -> &[f64] {
        let i = (r * self.cols + c) * self.channels;
        &self.tokens[i..i + self.channels]
    }

    /// Tokens as a `[len x channels]` matrix in row-major grid order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.len(), self.channels], self.tokens.clone())
    }

    /// 2x2 mean pooling with floored output dims; `None` once any axis would
    /// shrink to zero.
    pub fn pool2x2(&self) -> Option<TokenGrid> {
        let (r, c) = (self.rows / 2, self.cols / 2);
        if r == 0 || c == 0 {
            return None;
        }
        let ch = self.channels;
        let mut out = vec![0.0; r * c * ch];
        for y in 0..r {
            for x in 0..c {
                let o = &mut out[(y * c + x) * ch..(y * c + x + 1) * ch];
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    for (acc, v) in o.iter_mut().zip(self.token(2 * y + dy, 2 * x + dx)) {
                        *acc += v;
                    }
                }
                o.iter_mut().for_each(|v| *v *= 0.25);
            }
        }
        Some(TokenGrid {
            rows: r,
            cols: c,
            channels: ch,
            tokens: out,
            source_step: self.source_step,
            downsample_factor: self.downsample_factor * 2,
        })
    }
}

/// Elementwise sum of an appearance grid and a geometry grid.
pub fn fuse(v: &TokenGrid, g: &TokenGrid) -> Result<TokenGrid> {
    if (v.rows, v.cols, v.channels, v.downsample_factor) != (g.rows, g.cols, g.channels, g.downsample_factor)
        || v.source_step != g.source_step
    {
        return Err(Error::Fusion(format!(
            "cannot fuse {}x{}x{} (step {}) with {}x{}x{} (step {})",
            v.rows, v.cols, v.channels, v.source_step, g.rows, g.cols, g.channels, g.source_step
        )));
    }
    let tokens = v.tokens.iter().zip(&g.tokens).map(|(a, b)| a + b).collect();
    Ok(TokenGrid { tokens, ..v.clone() })
}

/// Step indices `{t, t-Δ, t-2Δ, ...}` present in `available`, newest first,
/// at most `window` entries.
pub fn sample_history(available: &[usize], stride: usize, t: usize, window: usize) -> Vec<usize> {
    let stride = stride.max(1);
    (0..=t / stride)
        .map(|k| t - k * stride)
        .filter(|s| available.contains(s))
        .take(window)
        .collect()
}

/// Per-episode cache of geometry frame summaries. Index 0 is the reference
/// frame and is never evicted.
#[derive(Clone, Debug)]
pub struct GeometryFrameCache {
    limit: usize,
    summaries: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl GeometryFrameCache {
    pub fn new(limit: usize, seed: u64) -> Self {
        Self {
            limit: limit.max(1),
            summaries: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.summaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.summaries.is_empty()
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn summaries(&self) -> &[Vec<f64>] {
        &self.summaries
    }

    /// Appends a summary, then evicts one random non-reference entry if the
    /// cache is over its limit. Returns the evicted index.
    pub fn insert(&mut self, summary: Vec<f64>) -> Option<usize> {
        self.summaries.push(summary);
        if self.summaries.len() <= self.limit {
            return None;
        }
        if self.summaries.len() == 1 {
            return None;
        }
        let victim = self.rng.random_range(1..self.summaries.len());
        self.summaries.remove(victim);
        Some(victim)
    }
}

fn matvec_rows(x: &[f64], rows: usize, w: &Tensor) -> Vec<f64> {
    let (k, n) = (w.rows(), w.cols());
    debug_assert_eq!(x.len(), rows * k);
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        let o = &mut out[r * n..(r + 1) * n];
        for (i, &xv) in x[r * k..(r + 1) * k].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (ov, wv) in o.iter_mut().zip(w.row(i)) {
                *ov += xv * wv;
            }
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Random frozen encoder weights, fully determined by the seed. All biases
/// are zero.
#[derive(Clone, Debug)]
pub struct ObservationEncoder {
    pub cfg: EncoderConfig,
    patch_embed: Tensor,
    group_proj: Tensor,
    depth_embed: Tensor,
    mix_q: Tensor,
    mix_k: Tensor,
    mix_v: Tensor,
    head1: Tensor,
    head2: Tensor,
}

impl ObservationEncoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, c) = (cfg.patch_size, cfg.dim);
        let std = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            patch_embed: Tensor::randn(&[3 * p * p, c], std(3 * p * p), &mut rng),
            group_proj: Tensor::randn(&[c, c], std(c), &mut rng),
            depth_embed: Tensor::randn(&[p * p, c], std(p * p), &mut rng),
            mix_q: Tensor::randn(&[c, c], std(c), &mut rng),
            mix_k: Tensor::randn(&[c, c], std(c), &mut rng),
            mix_v: Tensor::randn(&[c, c], std(c), &mut rng),
            head1: Tensor::randn(&[c, 2 * c], std(c), &mut rng),
            head2: Tensor::randn(&[2 * c, c], std(2 * c), &mut rng),
            cfg,
        })
    }

    /// Patch matrix `[patches x channels*p*p]` in (dy, dx, channel) order.
    fn patches(&self, data: &[f64], height: usize, width: usize, channels: usize) -> (usize, usize, Vec<f64>) {
        let p = self.cfg.patch_size;
        let (ph, pw) = (height / p, width / p);
        let mut out = Vec::with_capacity(ph * pw * p * p * channels);
        for py in 0..ph {
            for px in 0..pw {
                for dy in 0..p {
                    for dx in 0..p {
                        let i = ((py * p + dy) * width + px * p + dx) * channels;
                        out.extend_from_slice(&data[i..i + channels]);
                    }
                }
            }
        }
        (ph, pw, out)
    }

    fn embed_and_group(&self, frame: &ObservationFrame, data: &[f64], channels: usize, embed: &Tensor) -> Result<TokenGrid> {
        let (rows, cols) = self.cfg.grid_shape(frame.height, frame.width)?;
        let (ph, pw, patches) = self.patches(data, frame.height, frame.width, channels);
        let emb = matvec_rows(&patches, ph * pw, embed);
        let patch_grid = TokenGrid::new(ph, pw, self.cfg.dim, emb, frame.step_index)?;
        let mut grouped = patch_grid.pool2x2().expect("patch grid is at least 2x2");
        debug_assert_eq!((grouped.rows, grouped.cols), (rows, cols));
        grouped.downsample_factor = 1;
        Ok(grouped)
    }

    /// Appearance tokens: patch embedding, 2x2 mean grouping, projection.
    pub fn encode_2d(&self, frame: &ObservationFrame) -> Result<TokenGrid> {
        let mut g = self.embed_and_group(frame, &frame.rgb, 3, &self.patch_embed)?;
        g.tokens = matvec_rows(&g.tokens, g.len(), &self.group_proj);
        Ok(g)
    }

    /// Geometry tokens from depth, mixed by one attention layer over the
    /// cached frame summaries plus the current one. The current summary is
    /// then inserted into the cache.
    pub fn encode_geometry(&self, frame: &ObservationFrame, cache: &mut GeometryFrameCache) -> Result<TokenGrid> {
        let mut g = self.embed_and_group(frame, &frame.depth, 1, &self.depth_embed)?;
        let (n, c) = (g.len(), self.cfg.dim);
        let mut summary = vec![0.0; c];
        for r in 0..n {
            for (s, v) in summary.iter_mut().zip(&g.tokens[r * c..(r + 1) * c]) {
                *s += v / n as f64;
            }
        }
        let mut memory: Vec<f64> = cache.summaries().iter().flatten().copied().collect();
        memory.extend_from_slice(&summary);
        let m = memory.len() / c;
        let q = matvec_rows(&g.tokens, n, &self.mix_q);
        let k = matvec_rows(&memory, m, &self.mix_k);
        let v = matvec_rows(&memory, m, &self.mix_v);
        let scale = 1.0 / (c as f64).sqrt();
        let mut mixed = g.tokens.clone();
        for r in 0..n {
            let qr = &q[r * c..(r + 1) * c];
            let scores: Vec<f64> = (0..m)
                .map(|j| qr.iter().zip(&k[j * c..(j + 1) * c]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for (o, vv) in mixed[r * c..(r + 1) * c].iter_mut().zip(&v[j * c..(j + 1) * c]) {
                    *o += e / z * vv;
                }
            }
        }
        let hidden: Vec<f64> = matvec_rows(&mixed, n, &self.head1).into_iter().map(gelu).collect();
        g.tokens = matvec_rows(&hidden, n, &self.head2);
        cache.insert(summary);
        Ok(g)
    }

    /// Geometry-enhanced tokens `f = v + g`.
    pub fn encode(&self, frame: &ObservationFrame, cache: &mut GeometryFrameCache) -> Result<TokenGrid> {
        let v = self.encode_2d(frame)?;
        let g = self.encode_geometry(frame, cache)?;
        fuse(&v, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(h: usize, w: usize, seed: u64, step: usize) -> ObservationFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = (0..h * w * 3).map(|_| rng.random::<f64>()).collect();
        let depth = (0..h * w).map(|_| rng.random_range(0.0..5.0)).collect();
        ObservationFrame::new(h, w, rgb, depth, step).unwrap()
    }

    #[test]
    fn grid_shapes_follow_floor_formula() {
        let enc = |p| {
            ObservationEncoder::new(EncoderConfig { patch_size: p, dim: 8, ..Default::default() }, 0).unwrap()
        };
        let g = enc(4).encode_2d(&frame(32, 32, 0, 0)).unwrap();
        assert_eq!((g.rows, g.cols, g.len()), (4, 4, 16));
        let g = enc(2).encode_2d(&frame(56, 56, 0, 0)).unwrap();
        assert_eq!(g.len(), 196);
        let g = enc(2).encode_2d(&frame(20, 28, 0, 0)).unwrap();
        assert_eq!((g.rows, g.cols, g.channels), (5, 7, 8));
    }

    #[test]
    fn indivisible_frame_is_config_error() {
        let e = ObservationEncoder::new(EncoderConfig::default(), 0).unwrap();
        assert!(matches!(e.encode_2d(&frame(18, 20, 0, 0)), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_gives_zero_tokens() {
        let e = ObservationEncoder::new(EncoderConfig::default(), 3).unwrap();
        let f = ObservationFrame::new(20, 20, vec![0.0; 1200], vec![0.0; 400], 0).unwrap();
        assert!(e.encode_2d(&f).unwrap().tokens.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_geometry_frame_depends_on_current_depth_only() {
        let e = ObservationEncoder::new(EncoderConfig::default(), 3).unwrap();
        let mut a = frame(20, 20, 1, 0);
        let b = frame(20, 20, 2, 0);
        a.depth = b.depth.clone();
        let ga = e.encode_geometry(&a, &mut GeometryFrameCache::new(16, 0)).unwrap();
        let gb = e.encode_geometry(&b, &mut GeometryFrameCache::new(16, 99)).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn cache_keeps_reference_and_limit() {
        let e = ObservationEncoder::new(EncoderConfig { geometry_cache_limit: 4, ..Default::default() }, 3).unwrap();
        let mut cache = GeometryFrameCache::new(4, 5);
        let first = frame(20, 20, 100, 0);
        e.encode_geometry(&first, &mut cache).unwrap();
        let reference = cache.summaries()[0].clone();
        for t in 1..30 {
            e.encode_geometry(&frame(20, 20, 100 + t, t as usize), &mut cache).unwrap();
            assert!(cache.len() <= 4);
            assert_eq!(cache.summaries()[0], reference);
        }
        assert_eq!(cache.len(), 4);
    }

    #[test]
    fn eviction_replays_under_seed() {
        let run = |seed| {
            let mut c = GeometryFrameCache::new(3, seed);
            (0..20).filter_map(|i| c.insert(vec![i as f64])).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    #[test]
    fn fuse_is_exact_addition() {
        let e = ObservationEncoder::new(EncoderConfig::default(), 3).unwrap();
        let f = frame(20, 20, 4, 2);
        let v = e.encode_2d(&f).unwrap();
        let g = e.encode_geometry(&f, &mut GeometryFrameCache::new(16, 0)).unwrap();
        let s = fuse(&v, &g).unwrap();
        assert_eq!(s, fuse(&g, &v).unwrap());
        for i in 0..s.tokens.len() {
            assert_eq!(s.tokens[i].to_bits(), (v.tokens[i] + g.tokens[i]).to_bits());
        }
        let zero = TokenGrid { tokens: vec![0.0; g.tokens.len()], ..g.clone() };
        assert_eq!(fuse(&v, &zero).unwrap(), v);
        let other = TokenGrid { source_step: 3, ..g };
        assert!(matches!(fuse(&v, &other), Err(Error::Fusion(_))));
    }

    #[test]
    fn history_sampling() {
        let all: Vec<usize> = (0..=40).collect();
        assert_eq!(sample_history(&all, 4, 12, 12), vec![12, 8, 4, 0]);
        assert_eq!(sample_history(&all, 1, 5, 12), vec![5, 4, 3, 2, 1, 0]);
        assert_eq!(sample_history(&all, 1, 20, 12).len(), 12);
        assert_eq!(sample_history(&all, 4, 0, 12), vec![0]);
    }

    #[test]
    fn pooling_floors_and_drops() {
        let g = TokenGrid::new(14, 14, 1, vec![1.0; 196], 0).unwrap();
        let a = g.pool2x2().unwrap();
        let b = a.pool2x2().unwrap();
        let c = b.pool2x2().unwrap();
        assert_eq!((a.rows, b.rows, c.rows), (7, 3, 1));
        assert_eq!(c.downsample_factor, 8);
        assert!(c.pool2x2().is_none());
    }
}
