//! Per-layer parameter table of a [`ModelSpec`] compared with the
//! published reference tables.

use std::fmt::Write as _;

use serde::Serialize;

use super::spec::{
    ModelSpec, ReferenceRow, PAPER_WIDTHS, REFERENCE_DECODER, REFERENCE_DECODER_TOTAL, REFERENCE_ENCODER,
    REFERENCE_ENCODER_TOTAL,
};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchRow {
    pub part: &'static str,
    pub layer: String,
    pub out_shape: (usize, usize, usize),
    pub params: usize,
    pub reference_params: Option<usize>,
    pub reference_shape: Option<(usize, usize, usize)>,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchReport {
    pub num_classes: usize,
    pub input_size: (usize, usize, usize),
    pub rows: Vec<ArchRow>,
    pub encoder_total: usize,
    pub mask_decoder_total: usize,
    pub image_decoder_total: usize,
    /// Whether the spec is the full-size configuration the tables describe.
    pub compared: bool,
    pub mismatches: Vec<String>,
    /// Reference entries known to be inconsistent with the rest of the tables.
    pub notes: Vec<String>,
}

impl ArchReport {
    pub fn all_match(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "K = {}, input {:?}", self.num_classes, self.input_size);
        let _ = writeln!(
            s,
            "{:<14} {:<38} {:>16} {:>12} {:>12}  ok",
            "part", "layer", "output", "params", "reference"
        );
        for r in &self.rows {
            let reference = r.reference_params.map_or("-".to_string(), |p| p.to_string());
            let ok = match (self.compared, r.matches) {
                (false, _) => "",
                (true, true) => "yes",
                (true, false) => "NO",
            };
            let _ = writeln!(
                s,
                "{:<14} {:<38} {:>16} {:>12} {:>12}  {ok}",
                r.part,
                r.layer,
                format!("{:?}", r.out_shape),
                r.params,
                reference
            );
        }
        let _ = writeln!(s, "encoder total        {}", self.encoder_total);
        let _ = writeln!(s, "mask decoder total   {}", self.mask_decoder_total);
        let _ = writeln!(s, "image decoder total  {}", self.image_decoder_total);
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for m in &self.mismatches {
            let _ = writeln!(s, "MISMATCH: {m}");
        }
        s
    }
}

fn is_reference_config(spec: &ModelSpec) -> bool {
    let Ok(paper) = ModelSpec::unet(spec.num_classes, 224, 224, PAPER_WIDTHS) else {
        return false;
    };
    spec.input_size == paper.input_size
        && spec.encoder.len() == paper.encoder.len()
        && spec.encoder.iter().zip(&paper.encoder).all(|(a, b)| a.out_channels == b.out_channels)
        && spec.decoder_x.len() == paper.decoder_x.len()
}

fn compare(
    part: &'static str,
    layer: String,
    out_shape: (usize, usize, usize),
    params: usize,
    reference: Option<&ReferenceRow>,
    mismatches: &mut Vec<String>,
) -> ArchRow {
    let matches = reference.is_none_or(|r| r.params == params && r.out_shape == out_shape && r.layer == layer);
    if let (false, Some(r)) = (matches, reference) {
        mismatches.push(format!(
            "{part} {layer}: {params} params {out_shape:?}, reference {} `{}` {:?}",
            r.params, r.layer, r.out_shape
        ));
    }
    ArchRow {
        part,
        layer,
        out_shape,
        params,
        reference_params: reference.map(|r| r.params),
        reference_shape: reference.map(|r| r.out_shape),
        matches,
    }
}

/// Derives every row of `spec` and, for the full-size configuration,
/// checks it against the reference tables.
pub fn check_arch(spec: &ModelSpec) -> Result<ArchReport> {
    let layout = spec.derive_layout()?;
    let compared = is_reference_config(spec);
    let mut mismatches = Vec::new();
    let mut notes = Vec::new();
    let mut rows = Vec::new();

    rows.push(compare(
        "encoder",
        "Input Layer".into(),
        spec.input_size,
        0,
        compared.then_some(&REFERENCE_ENCODER[0]),
        &mut mismatches,
    ));
    for (i, (row, l)) in spec.encoder.iter().zip(&layout.encoder).enumerate() {
        let reference = compared.then(|| &REFERENCE_ENCODER[i + 1]);
        rows.push(compare("encoder", row.describe(), l.out_shape, l.params, reference, &mut mismatches));
    }

    let bottleneck = layout.encoder.last().map(|l| l.out_shape).unwrap_or_default();
    rows.push(ArchRow {
        part: "image_decoder",
        layer: "Input from Encoder".into(),
        out_shape: bottleneck,
        params: 0,
        reference_params: compared.then_some(0),
        reference_shape: compared.then_some(REFERENCE_DECODER[0].out_shape),
        matches: true,
    });
    if compared && bottleneck != REFERENCE_DECODER[0].out_shape {
        notes.push(format!(
            "reference decoder input row lists {:?}, but the encoder's last row and the first decoder block's parameter count both imply {:?}; the counts are followed",
            REFERENCE_DECODER[0].out_shape, bottleneck
        ));
    }
    let n = spec.decoder_x.len();
    for (i, (row, l)) in spec.decoder_x.iter().zip(&layout.decoder_x).enumerate() {
        // The final row's reference is for two classes (six output channels).
        let reference = (compared && (i + 1 < n || spec.num_classes == 2)).then(|| &REFERENCE_DECODER[i + 1]);
        let layer = if i + 1 == n && reference.is_some() {
            "Conv(c=C_out, k=3, s=1)".to_string()
        } else {
            row.describe()
        };
        rows.push(compare("image_decoder", layer, l.out_shape, l.params, reference, &mut mismatches));
    }
    for (row, l) in spec.decoder_mask.iter().zip(&layout.decoder_mask) {
        rows.push(compare("mask_decoder", row.describe(), l.out_shape, l.params, None, &mut mismatches));
    }

    if compared {
        let enc_ref = REFERENCE_ENCODER_TOTAL;
        if layout.encoder_total() != enc_ref {
            mismatches.push(format!("encoder total {} != reference {enc_ref}", layout.encoder_total()));
        }
        if spec.num_classes == 2 {
            let dec_ref = REFERENCE_DECODER_TOTAL;
            if layout.decoder_x_total() != dec_ref {
                mismatches.push(format!("image decoder total {} != reference {dec_ref}", layout.decoder_x_total()));
            }
        } else {
            notes.push("reference decoder table is for K = 2; final row not compared".into());
        }
    } else {
        notes.push("not the full-size configuration; reference tables not compared".into());
    }

    Ok(ArchReport {
        num_classes: spec.num_classes,
        input_size: spec.input_size,
        rows,
        encoder_total: layout.encoder_total(),
        mask_decoder_total: layout.decoder_mask_total(),
        image_decoder_total: layout.decoder_x_total(),
        compared,
        mismatches,
        notes,
    })
}
