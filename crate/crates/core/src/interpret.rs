//! Feature attribution post-processing: top-fraction masks, input-gradient
//! sensitivity maps, and PGM/PPM overlay export.
//!
//! Files written by [`export_overlay`] for a base path `p`:
//!
//! * `p.pgm`: binary graymap (`P5`), one byte per pixel, `round(255·x)`.
//! * `p_overlay.ppm`: binary pixmap (`P6`); selected pixels are `(255,0,0)`,
//!   others repeat the gray value on all three channels.
//! * `p_mask.csv`: header `index`, then one selected pixel index per line.
//!
//! Both image headers are `P5|P6\n<width> <height>\n255\n`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{Classifier, ContributionMode, NamModel};
use crate::numkit::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContributionSource {
    NamValue,
    NamGradient,
    BackboneGradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionMap {
    pub scores: Vec<f64>,
    pub source: ContributionSource,
    pub image_shape: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ranking {
    /// Rank by `|C_j|`.
    #[default]
    Magnitude,
    /// Rank by `C_j` itself (most positive first).
    Signed,
}

impl std::str::FromStr for Ranking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "signed" => Ok(Self::Signed),
            other => Err(Error::Config(format!("unknown ranking {other:?}"))),
        }
    }
}

impl std::fmt::Display for Ranking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Magnitude => "magnitude",
            Self::Signed => "signed",
        })
    }
}

pub const TIE_RULE_ASCENDING_INDEX: &str = "ascending-index";

#[derive(Debug, Clone, PartialEq)]
pub struct PixelMask {
    pub bits: Vec<bool>,
    pub fraction: f64,
    pub tie_rule: &'static str,
}

impl PixelMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let fraction = bits.iter().filter(|&&b| b).count() as f64 / bits.len().max(1) as f64;
        Self {
            bits,
            fraction,
            tie_rule: TIE_RULE_ASCENDING_INDEX,
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Number of selected entries, `⌈fraction·d⌉`, robust to representation
/// error (0.3 × 10 selects 3).
pub fn selection_count(fraction: f64, d: usize) -> usize {
    ((fraction * d as f64 - 1e-9).ceil().max(1.0) as usize).min(d)
}

pub fn top_fraction_mask(contributions: &[f64], fraction: f64) -> Result<PixelMask> {
    top_fraction_mask_with(contributions, fraction, Ranking::Magnitude)
}

/// Selects the `⌈fraction·d⌉` highest-ranked entries; ties go to the lower
/// index.
pub fn top_fraction_mask_with(contributions: &[f64], fraction: f64, ranking: Ranking) -> Result<PixelMask> {
    if contributions.is_empty() {
        return Err(Error::Config("top-fraction mask of an empty vector".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("mask fraction {fraction} outside (0, 1]")));
    }
    let key = |v: f64| match ranking {
        Ranking::Magnitude => v.abs(),
        Ranking::Signed => v,
    };
    let mut order: Vec<usize> = (0..contributions.len()).collect();
    order.sort_by(|&a, &b| {
        key(contributions[b])
            .total_cmp(&key(contributions[a]))
            .then(a.cmp(&b))
    });
    let k = selection_count(fraction, contributions.len());
    let mut bits = vec![false; contributions.len()];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Ok(PixelMask {
        bits,
        fraction,
        tie_rule: TIE_RULE_ASCENDING_INDEX,
    })
}

/// `|∂loss/∂x_j|` for one sample under the given label.
pub fn sensitivity_map<M: Classifier>(model: &M, sample: &[f64], label: usize, source: ContributionSource) -> Result<ContributionMap> {
    let x = Matrix::new(1, sample.len(), sample.to_vec())?;
    let (_, grads) = model.input_gradients(&x, &[label])?;
    let scores: Vec<f64> = grads.as_slice().iter().map(|g| g.abs()).collect();
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite sensitivity map".into()));
    }
    Ok(ContributionMap {
        scores,
        source,
        image_shape: None,
    })
}

/// Per-row NAM contribution maps.
pub fn nam_contribution_maps(
    model: &NamModel,
    batch: &Matrix,
    mode: ContributionMode,
    image_shape: Option<(usize, usize)>,
) -> Result<Vec<ContributionMap>> {
    let c = model.contributions(batch, mode)?;
    let source = match mode {
        ContributionMode::Value => ContributionSource::NamValue,
        ContributionMode::Gradient => ContributionSource::NamGradient,
    };
    Ok(c.iter_rows()
        .map(|r| ContributionMap {
            scores: r.to_vec(),
            source,
            image_shape,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayFiles {
    pub image: PathBuf,
    pub overlay: PathBuf,
    pub mask: PathBuf,
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn gray(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn pgm_bytes(image: &[f64], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| gray(v)));
    out
}

pub fn overlay_ppm_bytes(image: &[f64], h: usize, w: usize, mask: &PixelMask) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for (&v, &flag) in image.iter().zip(&mask.bits) {
        if flag {
            out.extend_from_slice(&[255, 0, 0]);
        } else {
            let g = gray(v);
            out.extend_from_slice(&[g, g, g]);
        }
    }
    out
}

pub fn export_overlay(image: &[f64], h: usize, w: usize, mask: &PixelMask, base: &Path) -> Result<OverlayFiles> {
    if image.len() != h * w || mask.bits.len() != h * w {
        return Err(Error::dims(
            "export_overlay",
            format!("image {} / mask {}", image.len(), mask.bits.len()),
            format!("{h}x{w}"),
        ));
    }
    let files = OverlayFiles {
        image: with_suffix(base, ".pgm"),
        overlay: with_suffix(base, "_overlay.ppm"),
        mask: with_suffix(base, "_mask.csv"),
    };
    fs::write(&files.image, pgm_bytes(image, h, w)).map_err(|e| Error::io(&files.image, e))?;
    fs::write(&files.overlay, overlay_ppm_bytes(image, h, w, mask)).map_err(|e| Error::io(&files.overlay, e))?;
    let mut csv = String::from("index\n");
    for i in mask.indices() {
        let _ = writeln!(csv, "{i}");
    }
    fs::write(&files.mask, csv).map_err(|e| Error::io(&files.mask, e))?;
    Ok(files)
}

/// Decoded netpbm image: width, height, channels, raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_netpbm(bytes: &[u8]) -> Result<Netpbm> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PGM/PPM file".into())),
    };
    // Header: magic, width, height, maxval separated by single whitespace.
    let mut fields = Vec::with_capacity(3);
    let mut pos = 2;
    while fields.len() < 3 {
        while bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            pos += 1;
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        fields.push(tok.parse::<usize>().map_err(|_| Error::Format("bad netpbm header".into()))?);
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}")));
    }
    let pixels = bytes.get(pos..).unwrap_or(&[]).to_vec();
    if pixels.len() != width * height * channels {
        return Err(Error::Format(format!(
            "payload {} bytes, expected {}",
            pixels.len(),
            width * height * channels
        )));
    }
    Ok(Netpbm {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn read_netpbm(path: &Path) -> Result<Netpbm> {
    parse_netpbm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Recovers the mask from an overlay: flagged pixels are pure red, which a
/// gray pixel can never be.
pub fn mask_from_overlay(ppm: &Netpbm) -> Result<Vec<bool>> {
    if ppm.channels != 3 {
        return Err(Error::Format("overlay must be a PPM".into()));
    }
    Ok(ppm
        .pixels
        .chunks_exact(3)
        .map(|p| p == [255, 0, 0])
        .collect())
}
