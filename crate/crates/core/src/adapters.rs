//! Residual bottleneck adapters and the freeze presets built around them.
//!
//! Both adapters project channels `C -> Ĉ -> C` with a zero-initialized up
//! projection, so inserting them leaves the host network unchanged until
//! training moves `W_up`.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Grid, Stride3};
use crate::error::{HctError, Result};
use crate::nn::Linear;
use crate::params::{FreezePlan, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Spatial adapter on every block's feed-forward branch.
    pub spatial: bool,
    /// Temporal adapter on the shared trunk features.
    pub temporal: bool,
    /// Bottleneck ratio `r = Ĉ / C`.
    pub ratio: f64,
    /// Depth-wise kernel extents `(time, height, width)`; all odd.
    pub temporal_kernel: Stride3,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { spatial: false, temporal: false, ratio: 0.25, temporal_kernel: [3, 1, 1] }
    }
}

impl AdapterConfig {
    pub fn any(&self) -> bool {
        self.spatial || self.temporal
    }

    /// `Ĉ = round(C·r)`, required to satisfy `0 < Ĉ < C`.
    pub fn bottleneck(&self, channels: usize) -> Result<usize> {
        let width = (channels as f64 * self.ratio).round();
        if !(width >= 1.0 && width < channels as f64) {
            return Err(HctError::Config(format!(
                "adapter ratio {} gives bottleneck width {width} for {channels} channels; need 0 < Ĉ < C",
                self.ratio
            )));
        }
        Ok(width as usize)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.any() {
            self.bottleneck(channels)?;
        }
        if self.temporal_kernel.iter().any(|k| k % 2 == 0) {
            return Err(HctError::Config(format!(
                "temporal adapter kernel {:?} must have odd extents",
                self.temporal_kernel
            )));
        }
        Ok(())
    }
}

/// `F + W_up(GELU(W_down F))`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialAdapter {
    pub down: Linear,
    pub up: Linear,
}

impl SpatialAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_bottleneck(channels, bottleneck)?;
        Ok(Self {
            down: Linear::new(store, &format!("{prefix}.down"), channels, bottleneck, false, rng)?,
            up: Linear::zeros(store, &format!("{prefix}.up"), bottleneck, channels, false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.down.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = self.up.forward(g, store, h)?;
        g.add(x, h)
    }

    pub fn numel(&self) -> usize {
        self.down.numel() + self.up.numel()
    }
}

/// `f + W_up(DWConv3D(W_down f))` over the token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TemporalAdapter {
    pub down: Linear,
    pub conv: ParamId,
    pub kernel: Stride3,
    pub up: Linear,
}

impl TemporalAdapter {
    /// The depth-wise kernel starts as a centred delta plus small noise.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        bottleneck: usize,
        kernel: Stride3,
        rng: &mut R,
    ) -> Result<Self> {
        check_bottleneck(channels, bottleneck)?;
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(HctError::Config(format!("depth-wise kernel {kernel:?} must have odd extents")));
        }
        let down = Linear::new(store, &format!("{prefix}.down"), channels, bottleneck, false, rng)?;
        let mut k = Tensor::randn(&[kernel[0], kernel[1], kernel[2], bottleneck], 0.1, rng);
        let centre = ((kernel[0] / 2) * kernel[1] + kernel[1] / 2) * kernel[2] + kernel[2] / 2;
        for c in 0..bottleneck {
            k.data_mut()[centre * bottleneck + c] += 1.0;
        }
        let conv = store.add(format!("{prefix}.conv"), k)?;
        let up = Linear::zeros(store, &format!("{prefix}.up"), bottleneck, channels, false)?;
        Ok(Self { down, conv, kernel, up })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, grid: Grid) -> Result<Var> {
        let s = g.shape(f).to_vec();
        if s.len() != 2 || s[0] != grid.len() {
            return Err(HctError::Dimension(format!(
                "temporal adapter input {s:?} does not factor as {}×{}×{}",
                grid.l, grid.h, grid.m
            )));
        }
        let h = self.down.forward(g, store, f)?;
        let h = g.reshape(h, &[grid.l, grid.h, grid.m, self.down.out_dim])?;
        let k = g.param(store, self.conv);
        let h = g.depthwise_conv3d(h, k)?;
        let h = g.reshape(h, &[grid.len(), self.down.out_dim])?;
        let h = self.up.forward(g, store, h)?;
        g.add(f, h)
    }

    pub fn numel(&self) -> usize {
        self.down.numel() + self.up.numel() + self.kernel.iter().product::<usize>() * self.down.out_dim
    }
}

fn check_bottleneck(channels: usize, bottleneck: usize) -> Result<()> {
    if bottleneck == 0 || bottleneck >= channels {
        return Err(HctError::Config(format!("adapter bottleneck {bottleneck} must satisfy 0 < Ĉ < C = {channels}")));
    }
    Ok(())
}

/// Parameter-efficiency configurations reported side by side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezePreset {
    /// Everything trains; no adapters.
    Full,
    /// Trunk frozen; no adapters.
    WithoutAdapters,
    /// Trunk frozen; spatial adapters train.
    Spatial,
    /// Trunk frozen; temporal adapter trains.
    Temporal,
    /// Trunk frozen; both adapters train.
    SpatialTemporal,
    /// Only adapter weights train.
    AdaptersOnly,
}

impl FreezePreset {
    pub const TABLE: [FreezePreset; 5] = [
        FreezePreset::Full,
        FreezePreset::WithoutAdapters,
        FreezePreset::Spatial,
        FreezePreset::Temporal,
        FreezePreset::SpatialTemporal,
    ];

    /// Which adapters the preset inserts, at the given ratio.
    pub fn adapters(self, ratio: f64, temporal_kernel: Stride3) -> AdapterConfig {
        let (spatial, temporal) = match self {
            FreezePreset::Full | FreezePreset::WithoutAdapters => (false, false),
            FreezePreset::Spatial => (true, false),
            FreezePreset::Temporal => (false, true),
            FreezePreset::SpatialTemporal | FreezePreset::AdaptersOnly => (true, true),
        };
        AdapterConfig { spatial, temporal, ratio, temporal_kernel }
    }

    pub fn plan(self) -> FreezePlan {
        let trunk = || vec!["trunk.*".to_string()];
        match self {
            FreezePreset::Full => FreezePlan::nothing(),
            FreezePreset::WithoutAdapters => FreezePlan { frozen: trunk(), tunable: vec![] },
            FreezePreset::Spatial => FreezePlan { frozen: trunk(), tunable: vec!["*.s_ada.*".into()] },
            FreezePreset::Temporal => FreezePlan { frozen: trunk(), tunable: vec![] },
            FreezePreset::SpatialTemporal => FreezePlan { frozen: trunk(), tunable: vec!["*.s_ada.*".into()] },
            FreezePreset::AdaptersOnly => {
                FreezePlan { frozen: vec!["*".into()], tunable: vec!["*.s_ada.*".into(), "t_ada.*".into()] }
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            FreezePreset::Full => "full",
            FreezePreset::WithoutAdapters => "w/o ST-Ada",
            FreezePreset::Spatial => "w/ S-Ada",
            FreezePreset::Temporal => "w/ T-Ada",
            FreezePreset::SpatialTemporal => "w/ ST-Ada",
            FreezePreset::AdaptersOnly => "adapters only",
        }
    }
}

impl fmt::Display for FreezePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}
