use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, GausMode};

/// Box regression term of the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BoxLoss {
    #[default]
    Ciou,
    L1,
}

impl BoxLoss {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ciou" => Ok(BoxLoss::Ciou),
            "l1" => Ok(BoxLoss::L1),
            _ => Err(Error::config(format!("unknown box loss {s:?} (expected ciou or l1)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxLoss::Ciou => "ciou",
            BoxLoss::L1 => "l1",
        }
    }
}

/// Bottleneck counts of every C2F block in the network. Lowering them is how
/// fusion-enabled models are brought back to the baseline parameter budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Depths {
    pub s1: usize,
    pub p3: usize,
    pub p4: usize,
    pub p5: usize,
    /// The C2F feeding the head (inside FMSA when it is enabled).
    pub neck: usize,
}

impl Default for Depths {
    fn default() -> Self {
        Depths {
            s1: 1,
            p3: 2,
            p4: 2,
            p5: 2,
            neck: 1,
        }
    }
}

impl Depths {
    pub fn total(&self) -> usize {
        self.s1 + self.p3 + self.p4 + self.p5 + self.neck
    }

    /// Every depth vector that is elementwise at most `self`.
    pub fn reductions(&self) -> Vec<Depths> {
        let mut out = Vec::new();
        for s1 in 0..=self.s1 {
            for p3 in 0..=self.p3 {
                for p4 in 0..=self.p4 {
                    for p5 in 0..=self.p5 {
                        for neck in 0..=self.neck {
                            out.push(Depths { s1, p3, p4, p5, neck });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Architecture and loss settings of the toy detector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 32.
    pub image_size: usize,
    pub stem_width: usize,
    /// Widths after the stride 4, 8, 16 and 32 stages.
    pub widths: [usize; 4],
    pub depths: Depths,
    pub fusion: FusionConfig,
    pub num_classes: usize,
    pub box_loss: BoxLoss,
    /// Initial objectness bias of the head.
    pub obj_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            stem_width: 8,
            widths: [16, 32, 64, 128],
            depths: Depths::default(),
            fusion: FusionConfig::default(),
            num_classes: 3,
            box_loss: BoxLoss::Ciou,
            obj_prior: -4.0,
        }
    }
}

impl ModelConfig {
    pub fn c3(&self) -> usize {
        self.widths[1]
    }

    pub fn c4(&self) -> usize {
        self.widths[2]
    }

    pub fn c5(&self) -> usize {
        self.widths[3]
    }

    /// Channels of the head output: objectness, `K` class logits, 4 box terms.
    pub fn head_channels(&self) -> usize {
        5 + self.num_classes
    }

    /// Same widths and depths with every fusion module switched off.
    pub fn as_baseline(&self) -> ModelConfig {
        let mut c = self.clone();
        c.fusion.enable_fmsa = false;
        c.fusion.enable_fus = false;
        c.fusion.enable_fds = false;
        c
    }

    /// True when the P4/P5 maps feed anything downstream.
    pub fn needs_deep_levels(&self) -> bool {
        let f = &self.fusion;
        f.enable_fmsa && (f.enable_fus || f.nearest_fallback)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.stem_width == 0 || self.widths.iter().any(|&w| w == 0 || w % 2 != 0) {
            return Err(Error::config(format!(
                "stage widths must be positive and even, got {:?}",
                self.widths
            )));
        }
        if !self.obj_prior.is_finite() {
            return Err(Error::config("obj_prior must be finite"));
        }
        self.fusion.validate()
    }

    /// Canonical text form of everything that shapes the parameter set.
    pub fn canonical(&self) -> String {
        let f = &self.fusion;
        let d = &self.depths;
        format!(
            "stem={};widths={},{},{},{};depths={},{},{},{},{};classes={};\
             fmsa={};fus={};fds={};fusion_channels={};fusion_depth={};heads={};mlp_ratio={};\
             gaus={};nearest_fallback={}",
            self.stem_width,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.widths[3],
            d.s1,
            d.p3,
            d.p4,
            d.p5,
            d.neck,
            self.num_classes,
            f.enable_fmsa,
            f.enable_fus,
            f.enable_fds,
            f.channels,
            f.depth,
            f.heads,
            f.mlp_ratio,
            match f.gaus_mode {
                GausMode::Replicate => "replicate",
                GausMode::PixelShuffle => "pixel_shuffle",
            },
            f.nearest_fallback,
        )
    }

    /// SHA-256 of [`ModelConfig::canonical`].
    pub fn digest(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(self.canonical().as_bytes()));
        out
    }
}
