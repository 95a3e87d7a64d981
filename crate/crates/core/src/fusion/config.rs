use crate::error::{Error, Result};
use crate::nn::{DEFAULT_HEADS, DEFAULT_MLP_RATIO};

/// How a GAUS block turns `C` channels into an upsampled map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GausMode {
    /// MLP reduces `C -> C/stride`, each token is copied into a `stride x stride` block.
    #[default]
    Replicate,
    /// MLP keeps `C`, then depth-to-space yields `C/stride^2` distinct channels per pixel.
    PixelShuffle,
}

/// Toggles and widths for the three fusion modules.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub enable_fmsa: bool,
    pub enable_fus: bool,
    pub enable_fds: bool,
    /// Common fusion width `C_f` at stride 8.
    pub channels: usize,
    pub fds_stride: usize,
    /// GAUS strides for the stride-32 and stride-16 maps.
    pub fus_stride_p5: usize,
    pub fus_stride_p4: usize,
    /// Encoder layers inside FMSA.
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub gaus_mode: GausMode,
    /// With FMSA on and FUS off, feed nearest-upsampled P4/P5 to FMSA instead of nothing.
    pub nearest_fallback: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            enable_fmsa: false,
            enable_fus: false,
            enable_fds: false,
            channels: 32,
            fds_stride: 2,
            fus_stride_p5: 4,
            fus_stride_p4: 2,
            depth: 1,
            heads: DEFAULT_HEADS,
            mlp_ratio: DEFAULT_MLP_RATIO,
            gaus_mode: GausMode::Replicate,
            nearest_fallback: true,
        }
    }
}

/// The five module combinations of the ablation table, indexed 0..=4.
pub const ABLATION_SETTINGS: [(bool, bool, bool); 5] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (true, false, true),
    (true, true, true),
];

impl FusionConfig {
    pub fn baseline(channels: usize) -> Self {
        FusionConfig {
            channels,
            ..Default::default()
        }
    }

    /// Ablation setting `id` (0 baseline, 1 FMSA, 2 FMSA+FUS, 3 FMSA+FDS, 4 all).
    pub fn setting(id: usize, channels: usize) -> Result<Self> {
        let &(fmsa, fus, fds) = ABLATION_SETTINGS
            .get(id)
            .ok_or_else(|| Error::config(format!("ablation setting {id} is not in 0..=4")))?;
        Ok(FusionConfig {
            enable_fmsa: fmsa,
            enable_fus: fus,
            enable_fds: fds,
            channels,
            ..Default::default()
        })
    }

    /// Setting id of this toggle combination, if it is one of the five legal ones.
    pub fn setting_id(&self) -> Option<usize> {
        ABLATION_SETTINGS
            .iter()
            .position(|&s| s == (self.enable_fmsa, self.enable_fus, self.enable_fds))
    }

    pub fn validate(&self) -> Result<()> {
        if (self.enable_fus || self.enable_fds) && !self.enable_fmsa {
            return Err(Error::config("FUS and FDS feed FMSA and require enable_fmsa"));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "fusion width {} is not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.fds_stride != 2 {
            return Err(Error::config(
                "FDS replaces a stride-2 downsample; fds_stride must be 2",
            ));
        }
        if self.fus_stride_p5 != 4 || self.fus_stride_p4 != 2 {
            return Err(Error::config(
                "FUS lifts stride 32 and 16 maps to stride 8; strides must be 4 and 2",
            ));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }
}
