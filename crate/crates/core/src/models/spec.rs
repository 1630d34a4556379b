//! Declarative description of the shared-encoder, dual-decoder U-Net.
//!
//! Each [`LayerSpec`] is one row of a parameter table: a convolution block
//! (or a single convolution) together with the trainable-parameter count and
//! output shape it is expected to have. Construction checks both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// A single convolution, optionally followed by a leaky rectifier.
    Conv,
    /// `[Conv, LeakyReLU, Conv, LeakyReLU, MaxPool(2, 2)]`.
    ConvBlock,
    /// `[Conv, LeakyReLU, Upsample(×2), Conv, LeakyReLU]`.
    ConvBlockUp,
    Upsample,
    MaxPool,
    LeakyRelu,
    Linear,
}

impl LayerKind {
    pub fn label(self) -> &'static str {
        match self {
            LayerKind::Conv => "Conv",
            LayerKind::ConvBlock => "ConvBlock",
            LayerKind::ConvBlockUp => "ConvBlock'",
            LayerKind::Upsample => "Upsample",
            LayerKind::MaxPool => "MaxPool",
            LayerKind::LeakyRelu => "LeakyReLU",
            LayerKind::Linear => "Linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Leaky rectifier after a plain `Conv`; ignored for blocks.
    #[serde(default)]
    pub activation: bool,
    pub declared_params: usize,
    /// `(channels, height, width)`.
    pub declared_out_shape: (usize, usize, usize),
}

impl LayerSpec {
    pub fn describe(&self) -> String {
        let act = if self.kind == LayerKind::Conv && self.activation {
            " + LeakyReLU"
        } else {
            ""
        };
        format!(
            "{}(c={}, k={}, s={}){act}",
            self.kind.label(),
            self.out_channels,
            self.kernel,
            self.stride
        )
    }

    /// Trainable parameters given the input channel count.
    pub fn param_count(&self, in_channels: usize) -> usize {
        let k2 = self.kernel * self.kernel;
        let c = self.out_channels;
        match self.kind {
            LayerKind::Conv => c * in_channels * k2 + c,
            LayerKind::ConvBlock | LayerKind::ConvBlockUp => {
                (c * in_channels * k2 + c) + (c * c * k2 + c)
            }
            LayerKind::Linear => c * in_channels + c,
            LayerKind::Upsample | LayerKind::MaxPool | LayerKind::LeakyRelu => 0,
        }
    }

    /// Output spatial size given the input spatial size.
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            LayerKind::ConvBlock | LayerKind::MaxPool => (h / 2, w / 2),
            LayerKind::ConvBlockUp | LayerKind::Upsample => (h * 2, w * 2),
            _ => (h, w),
        }
    }
}

/// Decoder stage `decoder_stage` concatenates the output of encoder stage
/// `encoder_stage` to its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipLink {
    pub decoder_stage: usize,
    pub encoder_stage: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_classes: usize,
    /// `(channels, height, width)` of the input image.
    pub input_size: (usize, usize, usize),
    pub encoder: Vec<LayerSpec>,
    /// Mask decoder; its last layer has `K` output channels.
    pub decoder_mask: Vec<LayerSpec>,
    /// Decomposition decoder; its last layer has `3K` output channels.
    pub decoder_x: Vec<LayerSpec>,
    pub skip_wiring: Vec<SkipLink>,
    pub leaky_slope: f64,
}

/// Channel widths of the four encoder blocks and the bottleneck.
pub const PAPER_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];

/// One row of a reference parameter table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReferenceRow {
    pub layer: &'static str,
    pub out_shape: (usize, usize, usize),
    pub params: usize,
}

/// Shared encoder at 224×224.
pub const REFERENCE_ENCODER: [ReferenceRow; 6] = [
    ReferenceRow { layer: "Input Layer", out_shape: (3, 224, 224), params: 0 },
    ReferenceRow { layer: "ConvBlock(c=64, k=3, s=1)", out_shape: (64, 112, 112), params: 38_720 },
    ReferenceRow { layer: "ConvBlock(c=128, k=3, s=1)", out_shape: (128, 56, 56), params: 221_440 },
    ReferenceRow { layer: "ConvBlock(c=256, k=3, s=1)", out_shape: (256, 28, 28), params: 885_248 },
    ReferenceRow { layer: "ConvBlock(c=512, k=3, s=1)", out_shape: (512, 14, 14), params: 3_539_968 },
    ReferenceRow { layer: "Conv(c=1024, k=3, s=1) + LeakyReLU", out_shape: (1024, 14, 14), params: 4_719_616 },
];
pub const REFERENCE_ENCODER_TOTAL: usize = 9_404_992;

/// Decomposition decoder at 224×224 with `C_out = 6` (two classes).
pub const REFERENCE_DECODER: [ReferenceRow; 7] = [
    ReferenceRow { layer: "Input from Encoder", out_shape: (512, 14, 14), params: 0 },
    ReferenceRow { layer: "ConvBlock'(c=512, k=3, s=1)", out_shape: (512, 28, 28), params: 9_438_208 },
    ReferenceRow { layer: "ConvBlock'(c=256, k=3, s=1)", out_shape: (256, 56, 56), params: 2_359_808 },
    ReferenceRow { layer: "ConvBlock'(c=128, k=3, s=1)", out_shape: (128, 112, 112), params: 590_080 },
    ReferenceRow { layer: "ConvBlock'(c=64, k=3, s=1)", out_shape: (64, 224, 224), params: 147_584 },
    ReferenceRow { layer: "Conv(c=64, k=3, s=1) + LeakyReLU", out_shape: (64, 224, 224), params: 36_928 },
    ReferenceRow { layer: "Conv(c=C_out, k=3, s=1)", out_shape: (6, 224, 224), params: 3_462 },
];
pub const REFERENCE_DECODER_TOTAL: usize = 12_576_070;

fn conv_row(kind: LayerKind, c: usize, activation: bool) -> LayerSpec {
    LayerSpec {
        kind,
        out_channels: c,
        kernel: 3,
        stride: 1,
        activation,
        declared_params: 0,
        declared_out_shape: (0, 0, 0),
    }
}

impl ModelSpec {
    /// U-Net with four down blocks of `widths[0..4]`, a `widths[4]`
    /// bottleneck convolution and a mirrored decoder. Declared counts and
    /// shapes are filled in from the wiring.
    pub fn unet(num_classes: usize, height: usize, width: usize, widths: [usize; 5]) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("K must be >= 2, got {num_classes}")));
        }
        if height % 16 != 0 || width % 16 != 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "input size {height}x{width} must be a positive multiple of 16"
            )));
        }
        let mut encoder: Vec<LayerSpec> = widths[..4]
            .iter()
            .map(|&c| conv_row(LayerKind::ConvBlock, c, true))
            .collect();
        encoder.push(conv_row(LayerKind::Conv, widths[4], true));

        let decoder = |c_out: usize| {
            let mut d: Vec<LayerSpec> = widths[..4]
                .iter()
                .rev()
                .map(|&c| conv_row(LayerKind::ConvBlockUp, c, true))
                .collect();
            d.push(conv_row(LayerKind::Conv, widths[0], true));
            d.push(conv_row(LayerKind::Conv, c_out, false));
            d
        };
        let skip_wiring = (0..4)
            .map(|i| SkipLink {
                decoder_stage: i,
                encoder_stage: 3 - i,
            })
            .collect();
        let mut spec = Self {
            num_classes,
            input_size: (3, height, width),
            encoder,
            decoder_mask: decoder(num_classes),
            decoder_x: decoder(3 * num_classes),
            skip_wiring,
            leaky_slope: crate::nn::LEAKY_SLOPE,
        };
        let layout = spec.derive_layout()?;
        layout.fill_declared(&mut spec);
        Ok(spec)
    }

    /// The full-size architecture at 224×224 with declared counts and shapes
    /// taken from the reference tables wherever they do not depend on `K`.
    pub fn paper(num_classes: usize) -> Result<Self> {
        let mut spec = Self::unet(num_classes, 224, 224, PAPER_WIDTHS)?;
        for (row, reference) in spec.encoder.iter_mut().zip(&REFERENCE_ENCODER[1..]) {
            row.declared_params = reference.params;
            row.declared_out_shape = reference.out_shape;
        }
        for decoder in [&mut spec.decoder_mask, &mut spec.decoder_x] {
            let n = decoder.len();
            for (row, reference) in decoder[..n - 1].iter_mut().zip(&REFERENCE_DECODER[1..]) {
                row.declared_params = reference.params;
                row.declared_out_shape = reference.out_shape;
            }
        }
        if num_classes == 2 {
            let last = spec.decoder_x.last_mut().expect("nonempty decoder");
            last.declared_params = REFERENCE_DECODER[6].params;
            last.declared_out_shape = REFERENCE_DECODER[6].out_shape;
        }
        Ok(spec)
    }

    /// All widths divided by `divisor` at the given square resolution.
    pub fn scaled(num_classes: usize, size: usize, divisor: usize) -> Result<Self> {
        if divisor == 0 || PAPER_WIDTHS.iter().any(|w| w % divisor != 0) {
            return Err(Error::Config(format!("width divisor {divisor} must divide 64")));
        }
        Self::unet(num_classes, size, size, PAPER_WIDTHS.map(|w| w / divisor))
    }

    /// 64×64 input with widths divided by 8.
    pub fn desk(num_classes: usize) -> Result<Self> {
        Self::scaled(num_classes, 64, 8)
    }

    /// Derives input channels, parameter counts and output shapes of every
    /// row from the wiring alone.
    pub fn derive_layout(&self) -> Result<Layout> {
        let (c0, h0, w0) = self.input_size;
        if c0 != 3 {
            return Err(Error::Construction {
                stage: "input".into(),
                reason: format!("expected 3 input channels, got {c0}"),
            });
        }
        let mut enc = Vec::with_capacity(self.encoder.len());
        let (mut c, mut h, mut w) = (c0, h0, w0);
        for (i, row) in self.encoder.iter().enumerate() {
            check_kind(row, &format!("encoder stage {i}"))?;
            if row.kind == LayerKind::ConvBlock && (h % 2 != 0 || w % 2 != 0) {
                return Err(Error::Construction {
                    stage: format!("encoder stage {i}"),
                    reason: format!("cannot halve spatial size {h}x{w}"),
                });
            }
            let params = row.param_count(c);
            let (nh, nw) = row.out_spatial(h, w);
            enc.push(RowLayout {
                in_channels: c,
                skip_channels: 0,
                params,
                out_shape: (row.out_channels, nh, nw),
            });
            (c, h, w) = (row.out_channels, nh, nw);
        }
        let bottleneck = (c, h, w);
        let mut decoders = Vec::new();
        for (name, rows) in [("mask decoder", &self.decoder_mask), ("decomposition decoder", &self.decoder_x)] {
            decoders.push(self.decoder_layout(name, rows, &enc, bottleneck)?);
        }
        let last_m = self.decoder_mask.last().map(|r| r.out_channels);
        let last_x = self.decoder_x.last().map(|r| r.out_channels);
        if last_m != Some(self.num_classes) {
            return Err(Error::Construction {
                stage: "mask decoder".into(),
                reason: format!("final layer must output K = {} channels", self.num_classes),
            });
        }
        if last_x != Some(3 * self.num_classes) {
            return Err(Error::Construction {
                stage: "decomposition decoder".into(),
                reason: format!("final layer must output 3K = {} channels", 3 * self.num_classes),
            });
        }
        for (name, d) in [("mask decoder", &decoders[0]), ("decomposition decoder", &decoders[1])] {
            let (_, oh, ow) = d.last().expect("nonempty").out_shape;
            if (oh, ow) != (h0, w0) {
                return Err(Error::Construction {
                    stage: name.into(),
                    reason: format!("output resolution {oh}x{ow} differs from input {h0}x{w0}"),
                });
            }
        }
        let decoder_x = decoders.pop().expect("two decoders");
        let decoder_mask = decoders.pop().expect("two decoders");
        Ok(Layout {
            encoder: enc,
            decoder_mask,
            decoder_x,
        })
    }

    fn decoder_layout(
        &self,
        name: &str,
        rows: &[LayerSpec],
        enc: &[RowLayout],
        bottleneck: (usize, usize, usize),
    ) -> Result<Vec<RowLayout>> {
        if rows.is_empty() {
            return Err(Error::Construction {
                stage: name.into(),
                reason: "decoder has no layers".into(),
            });
        }
        for link in &self.skip_wiring {
            if link.decoder_stage >= rows.len() || link.encoder_stage >= enc.len() {
                return Err(Error::Construction {
                    stage: format!("{name} stage {}", link.decoder_stage),
                    reason: format!(
                        "skip link {} <- encoder {} out of range",
                        link.decoder_stage, link.encoder_stage
                    ),
                });
            }
        }
        let (mut c, mut h, mut w) = bottleneck;
        let mut out = Vec::with_capacity(rows.len());
        for (i, row) in rows.iter().enumerate() {
            let stage = format!("{name} stage {i}");
            check_kind(row, &stage)?;
            let links: Vec<_> = self.skip_wiring.iter().filter(|l| l.decoder_stage == i).collect();
            if links.len() > 1 {
                return Err(Error::Construction {
                    stage,
                    reason: "more than one skip link".into(),
                });
            }
            let skip_channels = match links.first() {
                Some(link) => {
                    let (sc, sh, sw) = enc[link.encoder_stage].out_shape;
                    if (sh, sw) != (h, w) {
                        return Err(Error::Construction {
                            stage,
                            reason: format!(
                                "skip from encoder stage {} is {sh}x{sw} but the decoder input is {h}x{w}",
                                link.encoder_stage
                            ),
                        });
                    }
                    sc
                }
                None => 0,
            };
            let in_channels = c + skip_channels;
            let params = row.param_count(in_channels);
            let (nh, nw) = row.out_spatial(h, w);
            out.push(RowLayout {
                in_channels,
                skip_channels,
                params,
                out_shape: (row.out_channels, nh, nw),
            });
            (c, h, w) = (row.out_channels, nh, nw);
        }
        Ok(out)
    }

    /// Declared trainable parameters of the encoder.
    pub fn encoder_declared_total(&self) -> usize {
        self.encoder.iter().map(|r| r.declared_params).sum()
    }

    pub fn decoder_mask_declared_total(&self) -> usize {
        self.decoder_mask.iter().map(|r| r.declared_params).sum()
    }

    pub fn decoder_x_declared_total(&self) -> usize {
        self.decoder_x.iter().map(|r| r.declared_params).sum()
    }

    /// Field-by-field differences against another spec, one line each.
    pub fn diff(&self, other: &ModelSpec) -> Vec<String> {
        let mut out = Vec::new();
        if self.num_classes != other.num_classes {
            out.push(format!("num_classes: {} != {}", self.num_classes, other.num_classes));
        }
        if self.input_size != other.input_size {
            out.push(format!("input_size: {:?} != {:?}", self.input_size, other.input_size));
        }
        for (name, a, b) in [
            ("encoder", &self.encoder, &other.encoder),
            ("decoder_mask", &self.decoder_mask, &other.decoder_mask),
            ("decoder_x", &self.decoder_x, &other.decoder_x),
        ] {
            if a.len() != b.len() {
                out.push(format!("{name}: {} layers != {} layers", a.len(), b.len()));
                continue;
            }
            for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
                if ra != rb {
                    out.push(format!("{name}[{i}]: {} != {}", ra.describe(), rb.describe()));
                }
            }
        }
        if self.skip_wiring != other.skip_wiring {
            out.push(format!("skip_wiring: {:?} != {:?}", self.skip_wiring, other.skip_wiring));
        }
        if self.leaky_slope != other.leaky_slope {
            out.push(format!("leaky_slope: {} != {}", self.leaky_slope, other.leaky_slope));
        }
        out
    }
}

fn check_kind(row: &LayerSpec, stage: &str) -> Result<()> {
    match row.kind {
        LayerKind::Conv | LayerKind::ConvBlock | LayerKind::ConvBlockUp => {}
        other => {
            return Err(Error::Construction {
                stage: stage.into(),
                reason: format!("layer kind {} is not a U-Net stage", other.label()),
            })
        }
    }
    if row.kernel % 2 == 0 || row.stride != 1 || row.out_channels == 0 {
        return Err(Error::Construction {
            stage: stage.into(),
            reason: format!("unsupported geometry {}", row.describe()),
        });
    }
    Ok(())
}

/// Derived per-row quantities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayout {
    /// Input channels of the first convolution, including any skip.
    pub in_channels: usize,
    pub skip_channels: usize,
    pub params: usize,
    pub out_shape: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub encoder: Vec<RowLayout>,
    pub decoder_mask: Vec<RowLayout>,
    pub decoder_x: Vec<RowLayout>,
}

impl Layout {
    fn fill_declared(&self, spec: &mut ModelSpec) {
        for (rows, layout) in [
            (&mut spec.encoder, &self.encoder),
            (&mut spec.decoder_mask, &self.decoder_mask),
            (&mut spec.decoder_x, &self.decoder_x),
        ] {
            for (row, l) in rows.iter_mut().zip(layout) {
                row.declared_params = l.params;
                row.declared_out_shape = l.out_shape;
            }
        }
    }

    pub fn encoder_total(&self) -> usize {
        self.encoder.iter().map(|r| r.params).sum()
    }

    pub fn decoder_mask_total(&self) -> usize {
        self.decoder_mask.iter().map(|r| r.params).sum()
    }

    pub fn decoder_x_total(&self) -> usize {
        self.decoder_x.iter().map(|r| r.params).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_totals_are_row_sums() {
        let enc: usize = REFERENCE_ENCODER.iter().map(|r| r.params).sum();
        let dec: usize = REFERENCE_DECODER.iter().map(|r| r.params).sum();
        assert_eq!(enc, REFERENCE_ENCODER_TOTAL);
        assert_eq!(dec, REFERENCE_DECODER_TOTAL);
    }

    #[test]
    fn derived_skip_channels_at_full_size() {
        let spec = ModelSpec::paper(2).unwrap();
        let layout = spec.derive_layout().unwrap();
        let ins: Vec<usize> = layout.decoder_x[..4].iter().map(|r| r.in_channels).collect();
        assert_eq!(ins, vec![1536, 768, 384, 192]);
        assert_eq!(layout.encoder_total(), 9_404_992);
        assert_eq!(layout.decoder_x_total(), 12_576_070);
        assert_eq!(layout.decoder_x.last().unwrap().params, 3_462);
        assert_eq!(layout.decoder_mask.last().unwrap().params, 1_154);
        assert_eq!(layout.decoder_mask_total(), 12_573_762);
    }

    #[test]
    fn declared_rows_match_derived_rows_at_full_size() {
        let spec = ModelSpec::paper(2).unwrap();
        let layout = spec.derive_layout().unwrap();
        for (row, l) in spec.encoder.iter().zip(&layout.encoder) {
            assert_eq!(row.declared_params, l.params);
            assert_eq!(row.declared_out_shape, l.out_shape);
        }
        for (row, l) in spec.decoder_x.iter().zip(&layout.decoder_x) {
            assert_eq!(row.declared_params, l.params, "{}", row.describe());
        }
    }

    #[test]
    fn rejects_bad_sizes_and_classes() {
        assert!(ModelSpec::unet(2, 60, 64, PAPER_WIDTHS).is_err());
        assert!(ModelSpec::unet(1, 64, 64, PAPER_WIDTHS).is_err());
        assert!(ModelSpec::scaled(2, 64, 3).is_err());
    }

    #[test]
    fn miswired_skip_is_reported_with_stage() {
        let mut spec = ModelSpec::desk(2).unwrap();
        spec.skip_wiring[0].encoder_stage = 2;
        match spec.derive_layout() {
            Err(Error::Construction { stage, .. }) => assert!(stage.contains("stage 0"), "{stage}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_diff_lists_changed_fields() {
        let a = ModelSpec::desk(2).unwrap();
        let b = ModelSpec::desk(3).unwrap();
        let diff = a.diff(&b);
        assert!(diff.iter().any(|l| l.starts_with("num_classes")));
        assert!(a.diff(&a).is_empty());
    }
}
