//! Multi-head pooling attention: the shared trunk blocks and the pooled
//! query/key/value machinery reused by relation aggregation.
//!
//! Token maps are `[L, C]` with `L = l·h·m` laid out row-major over
//! `(time, height, width)`; the factorization travels alongside as a [`Grid`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::SpatialAdapter;
use crate::error::{HctError, Result};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels::pooled_extent, Graph, PoolKind, Tensor, Var};

/// Pooling factors along `(time, height, width)`.
pub type Stride3 = [usize; 3];

pub const UNIT_STRIDE: Stride3 = [1, 1, 1];

/// Space-time factorization `L = l × h × m` of a token map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub l: usize,
    pub h: usize,
    pub m: usize,
}

impl Grid {
    pub fn new(l: usize, h: usize, m: usize) -> Self {
        Self { l, h, m }
    }

    pub fn len(&self) -> usize {
        self.l * self.h * self.m
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pooled(&self, stride: Stride3) -> Grid {
        Grid {
            l: pooled_extent(self.l, stride[0]),
            h: pooled_extent(self.h, stride[1]),
            m: pooled_extent(self.m, stride[2]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub q_stride: Stride3,
    pub kv_stride: Stride3,
    #[serde(default)]
    pub pool: PoolKind,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, q_stride: Stride3, kv_stride: Stride3) -> Self {
        Self { channels, heads, q_stride, kv_stride, pool: PoolKind::Avg }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(HctError::Config(format!("channels {} not divisible by heads {}", self.channels, self.heads)));
        }
        if self.q_stride.contains(&0) || self.kv_stride.contains(&0) {
            return Err(HctError::Config(format!(
                "strides must be >= 1, got q {:?} kv {:?}",
                self.q_stride, self.kv_stride
            )));
        }
        Ok(())
    }

    /// Per-head width `d = C / H`.
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// `W_q`, `W_k`, `W_v` and an optional output projection. The key projection
/// has no bias: softmax is invariant to a shift shared by every key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Option<Linear>,
}

impl AttentionWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        out_proj: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{prefix}.q"), channels, channels, true, rng)?,
            k: Linear::new(store, &format!("{prefix}.k"), channels, channels, false, rng)?,
            v: Linear::new(store, &format!("{prefix}.v"), channels, channels, true, rng)?,
            out: if out_proj {
                Some(Linear::new(store, &format!("{prefix}.out"), channels, channels, true, rng)?)
            } else {
                None
            },
        })
    }
}

fn check_grid(g: &Graph, x: Var, grid: Grid) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 2 || s[0] != grid.len() {
        return Err(HctError::Dimension(format!(
            "token map {s:?} does not factor as l×h×m = {}×{}×{}",
            grid.l, grid.h, grid.m
        )));
    }
    Ok(s[1])
}

/// Pools a `[L, C]` token map over its grid.
pub fn pool_tokens(g: &mut Graph, x: Var, grid: Grid, stride: Stride3, kind: PoolKind) -> Result<(Var, Grid)> {
    let c = check_grid(g, x, grid)?;
    if stride == UNIT_STRIDE {
        return Ok((x, grid));
    }
    let x4 = g.reshape(x, &[grid.l, grid.h, grid.m, c])?;
    let p = g.pool_st(x4, stride, kind)?;
    let out = grid.pooled(stride);
    Ok((g.reshape(p, &[out.len(), c])?, out))
}

/// Pooled query, key and value maps.
#[derive(Clone, Copy, Debug)]
pub struct PooledQkv {
    pub q: Var,
    pub q_grid: Grid,
    pub k: Var,
    pub v: Var,
    pub kv_grid: Grid,
}

/// `f_q = P(q_src·W_q; s1)`, `f_k = P(kv_src·W_k; s2)`, `f_v = P(kv_src·W_v; s2)`.
/// Self-attention passes the same map twice.
#[allow(clippy::too_many_arguments)]
pub fn pooled_qkv_cross(
    g: &mut Graph,
    store: &ParamStore,
    q_src: Var,
    q_grid: Grid,
    kv_src: Var,
    kv_grid: Grid,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
) -> Result<PooledQkv> {
    cfg.validate()?;
    for (x, grid) in [(q_src, q_grid), (kv_src, kv_grid)] {
        let c = check_grid(g, x, grid)?;
        if c != cfg.channels {
            return Err(HctError::Dimension(format!("token map has {c} channels, attention expects {}", cfg.channels)));
        }
    }
    let q = w.q.forward(g, store, q_src)?;
    let k = w.k.forward(g, store, kv_src)?;
    let v = w.v.forward(g, store, kv_src)?;
    let (q, q_grid) = pool_tokens(g, q, q_grid, cfg.q_stride, cfg.pool)?;
    let (k, kv_out) = pool_tokens(g, k, kv_grid, cfg.kv_stride, cfg.pool)?;
    let (v, _) = pool_tokens(g, v, kv_grid, cfg.kv_stride, cfg.pool)?;
    Ok(PooledQkv { q, q_grid, k, v, kv_grid: kv_out })
}

pub fn pooled_qkv(
    g: &mut Graph,
    store: &ParamStore,
    f: Var,
    grid: Grid,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
) -> Result<PooledQkv> {
    pooled_qkv_cross(g, store, f, grid, f, grid, cfg, w)
}

/// `[L, H·d] -> [H, L, d]` (or `[H, d, L]` when `transposed`).
fn split_heads(g: &mut Graph, x: Var, heads: usize, transposed: bool) -> Result<Var> {
    let (l, c) = (g.shape(x)[0], g.shape(x)[1]);
    let d = c / heads;
    let mut index = Vec::with_capacity(l * c);
    for h in 0..heads {
        if transposed {
            for j in 0..d {
                for r in 0..l {
                    index.push(r * c + h * d + j);
                }
            }
        } else {
            for r in 0..l {
                for j in 0..d {
                    index.push(r * c + h * d + j);
                }
            }
        }
    }
    let shape = if transposed { vec![heads, d, l] } else { vec![heads, l, d] };
    g.gather(x, shape, index)
}

/// `[H, L, d] -> [L, H·d]`
fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let (heads, l, d) = (g.shape(x)[0], g.shape(x)[1], g.shape(x)[2]);
    let mut index = Vec::with_capacity(heads * l * d);
    for r in 0..l {
        for h in 0..heads {
            for j in 0..d {
                index.push((h * l + r) * d + j);
            }
        }
    }
    g.gather(x, vec![l, heads * d], index)
}

/// `softmax(f_q f_kᵀ / √d) f_v` per head, heads merged back along channels.
/// `key_keep` removes key/value rows from every query's softmax.
pub fn scaled_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize, key_keep: Option<&[bool]>) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || ks != vs || qs[1] != ks[1] {
        return Err(HctError::Dimension(format!("attention operands q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    if heads == 0 || qs[1] % heads != 0 {
        return Err(HctError::Dimension(format!("{} channels cannot be split into {heads} heads", qs[1])));
    }
    let d = qs[1] / heads;
    let qh = split_heads(g, q, heads, false)?;
    let kt = split_heads(g, k, heads, true)?;
    let vh = split_heads(g, v, heads, false)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = g.softmax_rows(scores, key_keep)?;
    let out = g.matmul(probs, vh)?;
    merge_heads(g, out)
}

/// Output of a pooled self-attention.
#[derive(Clone, Copy, Debug)]
pub struct MhpaOutput {
    pub out: Var,
    pub grid: Grid,
    /// The pooled query map `f_q`.
    pub query: Var,
}

/// Pooled multi-head self-attention, including the output projection.
pub fn mhpa(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    grid: Grid,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    key_keep: Option<&[bool]>,
) -> Result<MhpaOutput> {
    let qkv = pooled_qkv(g, store, x, grid, cfg, w)?;
    if key_keep.is_some() && cfg.kv_stride != UNIT_STRIDE {
        return Err(HctError::Config("key masks require a unit key/value stride".into()));
    }
    let att = scaled_attention(g, qkv.q, qkv.k, qkv.v, cfg.heads, key_keep)?;
    let out = match &w.out {
        Some(o) => o.forward(g, store, att)?,
        None => att,
    };
    Ok(MhpaOutput { out, grid: qkv.q_grid, query: qkv.q })
}

/// Pre-norm pooling attention block with a GELU feed-forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockWeights {
    pub norm1: LayerNorm,
    pub attn: AttentionWeights,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub s_ada: Option<SpatialAdapter>,
}

impl BlockWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), channels)?,
            attn: AttentionWeights::new(store, &format!("{prefix}.attn"), channels, true, rng)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), channels)?,
            ffn: FeedForward::new(store, &format!("{prefix}.ffn"), channels, channels * mlp_ratio, rng)?,
            s_ada: None,
        })
    }
}

/// `x + FFN(LN(x))`, with the spatial adapter on the feed-forward branch
/// when present.
pub fn feed_forward_residual(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    norm: &LayerNorm,
    ffn: &FeedForward,
    s_ada: Option<&SpatialAdapter>,
) -> Result<Var> {
    let h = norm.forward(g, store, x)?;
    let mut h = ffn.forward(g, store, h)?;
    if let Some(a) = s_ada {
        h = a.forward(g, store, h)?;
    }
    g.add(x, h)
}

/// LN → pooled attention → output projection, residual from the pooled
/// input, then the feed-forward with its own residual.
pub fn mhpa_block(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    grid: Grid,
    cfg: &AttentionConfig,
    w: &BlockWeights,
) -> Result<(Var, Grid)> {
    let h = w.norm1.forward(g, store, x)?;
    let att = mhpa(g, store, h, grid, cfg, &w.attn, None)?;
    let (skip, _) = pool_tokens(g, x, grid, cfg.q_stride, cfg.pool)?;
    let y = g.add(skip, att.out)?;
    let y = feed_forward_residual(g, store, y, &w.norm2, &w.ffn, w.s_ada.as_ref())?;
    Ok((y, att.grid))
}

/// Strides of one trunk block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStrides {
    pub q_stride: Stride3,
    pub kv_stride: Stride3,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrunkConfig {
    pub clip_len: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub in_channels: usize,
    /// Patch extents `(time, height, width)`.
    pub patch: Stride3,
    pub channels: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub blocks: Vec<BlockStrides>,
    #[serde(default)]
    pub pool: PoolKind,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            clip_len: 16,
            frame_height: 32,
            frame_width: 32,
            in_channels: 3,
            patch: [2, 4, 4],
            channels: 48,
            heads: 4,
            mlp_ratio: 4,
            blocks: vec![
                BlockStrides { q_stride: [1, 2, 2], kv_stride: [1, 2, 2] },
                BlockStrides { q_stride: [1, 1, 1], kv_stride: [1, 2, 2] },
            ],
            pool: PoolKind::Avg,
        }
    }
}

impl TrunkConfig {
    /// Grid right after patch embedding.
    pub fn patch_grid(&self) -> Result<Grid> {
        let dims = [self.clip_len, self.frame_height, self.frame_width];
        if self.patch.contains(&0) || dims.iter().zip(&self.patch).any(|(d, p)| d % p != 0) {
            return Err(HctError::Config(format!("clip {dims:?} is not divisible into patches {:?}", self.patch)));
        }
        Ok(Grid::new(dims[0] / self.patch[0], dims[1] / self.patch[1], dims[2] / self.patch[2]))
    }

    /// Grid of the trunk output.
    pub fn output_grid(&self) -> Result<Grid> {
        let mut grid = self.patch_grid()?;
        for b in &self.blocks {
            grid = grid.pooled(b.q_stride);
        }
        Ok(grid)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch.iter().product::<usize>() * self.in_channels
    }

    pub fn block_config(&self, i: usize) -> AttentionConfig {
        AttentionConfig {
            channels: self.channels,
            heads: self.heads,
            q_stride: self.blocks[i].q_stride,
            kv_stride: self.blocks[i].kv_stride,
            pool: self.pool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.patch_grid()?;
        for i in 0..self.blocks.len() {
            self.block_config(i).validate()?;
        }
        Ok(())
    }
}

/// Patch embedding, learned positions, pooling blocks and a final norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub cfg: TrunkConfig,
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<BlockWeights>,
    pub norm: LayerNorm,
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: TrunkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.patch_grid()?;
        let embed = Linear::new(store, &format!("{prefix}.patch_embed"), cfg.patch_dim(), cfg.channels, true, rng)?;
        let pos = store.add(format!("{prefix}.pos_embed"), Tensor::randn(&[grid.len(), cfg.channels], 0.02, rng))?;
        let blocks = (0..cfg.blocks.len())
            .map(|i| BlockWeights::new(store, &format!("{prefix}.blocks.{i}"), cfg.channels, cfg.mlp_ratio, rng))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), cfg.channels)?;
        Ok(Self { cfg, embed, pos, blocks, norm })
    }

    /// Non-overlapping space-time patches of a `[T, H, W, Cin]` clip, one row
    /// per patch with features ordered `(dt, dh, dw, c)`.
    pub fn patchify(&self, g: &mut Graph, clip: Var) -> Result<(Var, Grid)> {
        let c = &self.cfg;
        let want = [c.clip_len, c.frame_height, c.frame_width, c.in_channels];
        if g.shape(clip) != want {
            return Err(HctError::Dimension(format!("clip of shape {:?}, trunk expects {want:?}", g.shape(clip))));
        }
        let grid = c.patch_grid()?;
        let [pt, ph, pw] = c.patch;
        let (hh, ww, cin) = (c.frame_height, c.frame_width, c.in_channels);
        let mut index = Vec::with_capacity(grid.len() * c.patch_dim());
        for t in 0..grid.l {
            for h in 0..grid.h {
                for w in 0..grid.m {
                    for dt in 0..pt {
                        for dh in 0..ph {
                            for dw in 0..pw {
                                let base = (((t * pt + dt) * hh + h * ph + dh) * ww + w * pw + dw) * cin;
                                index.extend(base..base + cin);
                            }
                        }
                    }
                }
            }
        }
        Ok((g.gather(clip, vec![grid.len(), c.patch_dim()], index)?, grid))
    }

    /// Shared feature map `[L, C]` of a clip, with its factorization.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, clip: Var) -> Result<(Var, Grid)> {
        let (patches, mut grid) = self.patchify(g, clip)?;
        let x = self.embed.forward(g, store, patches)?;
        let pos = g.param(store, self.pos);
        let mut x = g.add(x, pos)?;
        for (i, block) in self.blocks.iter().enumerate() {
            let cfg = self.cfg.block_config(i);
            (x, grid) = mhpa_block(g, store, x, grid, &cfg, block)?;
        }
        Ok((self.norm.forward(g, store, x)?, grid))
    }
}
