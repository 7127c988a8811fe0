//! Bayer RGGB mosaic handling: packing into the 4-channel network input,
//! exposure amplification, patch cropping, geometric augmentation, green
//! channel extraction and entropy, plus PGM/PPM file IO.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Single-channel 16-bit Bayer sensor image, fixed RGGB pattern:
/// each 2x2 tile reads [[R, G1], [G2, B]].
#[derive(Clone, Debug, PartialEq)]
pub struct RawMosaic {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
    pub white_level: u16,
    pub black_level: u16,
}

impl RawMosaic {
    pub fn new(width: usize, height: usize, data: Vec<u16>, white_level: u16) -> Result<Self> {
        let m = RawMosaic { width, height, data, white_level, black_level: 0 };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::shape(
                "raw_mosaic",
                format!("dims {}x{} must be even (complete 2x2 CFA blocks)", self.width, self.height),
            ));
        }
        if self.data.len() != self.width * self.height {
            return Err(Error::shape(
                "raw_mosaic",
                format!("{} samples for {}x{} image", self.data.len(), self.width, self.height),
            ));
        }
        if self.black_level >= self.white_level {
            return Err(Error::invalid(
                "raw_mosaic",
                format!("black_level {} >= white_level {}", self.black_level, self.white_level),
            ));
        }
        if let Some(&v) = self.data.iter().find(|&&v| v > self.white_level) {
            return Err(Error::invalid(
                "raw_mosaic",
                format!("sample {} exceeds white_level {}", v, self.white_level),
            ));
        }
        Ok(())
    }

    pub fn at(&self, y: usize, x: usize) -> u16 {
        self.data[y * self.width + x]
    }
}

/// Exposure metadata carried next to a mosaic file.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SidecarMeta {
    pub exposure_in: f64,
    pub exposure_ref: f64,
    pub iso: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub black_level: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub white_level: Option<u16>,
}

impl SidecarMeta {
    pub fn amplification_ratio(&self) -> f64 {
        self.ratio.unwrap_or(self.exposure_ref / self.exposure_in)
    }
}

/// 4-channel half-resolution packed image, channel order R, G1, G2, B,
/// values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PackedRaw {
    pub width: usize,
    pub height: usize,
    /// Channel-major: 4 planes of height*width.
    pub data: Vec<f32>,
}

pub const CH_R: usize = 0;
pub const CH_G1: usize = 1;
pub const CH_G2: usize = 2;
pub const CH_B: usize = 3;

impl PackedRaw {
    pub fn zeros(width: usize, height: usize) -> Self {
        PackedRaw { width, height, data: vec![0.0; 4 * width * height] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// View as a (1, 4, H, W) tensor in the requested precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: [1, 4, self.height, self.width],
            data: self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }
}

/// Packs each 2x2 CFA block into one pixel across 4 channels, normalizing
/// (sample - black) / (white - black) into [0, 1].
pub fn pack(m: &RawMosaic) -> Result<PackedRaw> {
    m.validate()?;
    let (pw, ph) = (m.width / 2, m.height / 2);
    let mut p = PackedRaw::zeros(pw, ph);
    let scale = 1.0 / (m.white_level - m.black_level) as f32;
    let black = m.black_level as f32;
    let norm = |v: u16| ((v as f32 - black) * scale).max(0.0);
    for y in 0..ph {
        for x in 0..pw {
            p.set(CH_R, y, x, norm(m.at(2 * y, 2 * x)));
            p.set(CH_G1, y, x, norm(m.at(2 * y, 2 * x + 1)));
            p.set(CH_G2, y, x, norm(m.at(2 * y + 1, 2 * x)));
            p.set(CH_B, y, x, norm(m.at(2 * y + 1, 2 * x + 1)));
        }
    }
    Ok(p)
}

/// Exact inverse of [`pack`] for representable values; rounds to the
/// nearest integer sample.
pub fn unpack(p: &PackedRaw, white_level: u16) -> RawMosaic {
    unpack_with_black(p, white_level, 0)
}

pub fn unpack_with_black(p: &PackedRaw, white_level: u16, black_level: u16) -> RawMosaic {
    let (w, h) = (2 * p.width, 2 * p.height);
    let mut data = vec![0u16; w * h];
    let scale = (white_level - black_level) as f32;
    let mut put = |y: usize, x: usize, v: f32| {
        data[y * w + x] =
            (v * scale + black_level as f32).round().clamp(0.0, white_level as f32) as u16;
    };
    for y in 0..p.height {
        for x in 0..p.width {
            put(2 * y, 2 * x, p.at(CH_R, y, x));
            put(2 * y, 2 * x + 1, p.at(CH_G1, y, x));
            put(2 * y + 1, 2 * x, p.at(CH_G2, y, x));
            put(2 * y + 1, 2 * x + 1, p.at(CH_B, y, x));
        }
    }
    RawMosaic { width: w, height: h, data, white_level, black_level }
}

/// Multiplies by the amplification ratio and clamps to [0, 1].
pub fn amplify(p: &PackedRaw, meta: &SidecarMeta) -> Result<PackedRaw> {
    let ratio = meta.amplification_ratio();
    amplify_ratio(p, ratio)
}

pub fn amplify_ratio(p: &PackedRaw, ratio: f64) -> Result<PackedRaw> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(Error::invalid("amplify", format!("nonpositive ratio {}", ratio)));
    }
    let r = ratio as f32;
    Ok(PackedRaw {
        width: p.width,
        height: p.height,
        data: p.data.iter().map(|&v| (v * r).clamp(0.0, 1.0)).collect(),
    })
}

/// Non-overlapping row-major tiling; partial border patches are discarded.
/// A patch larger than the image yields an empty list.
pub fn crop_patches(p: &PackedRaw, patch: usize) -> Vec<PackedRaw> {
    let (ny, nx) = (p.height / patch, p.width / patch);
    let mut out = Vec::with_capacity(ny * nx);
    for ty in 0..ny {
        for tx in 0..nx {
            let mut q = PackedRaw::zeros(patch, patch);
            for c in 0..4 {
                for y in 0..patch {
                    for x in 0..patch {
                        q.set(c, y, x, p.at(c, ty * patch + y, tx * patch + x));
                    }
                }
            }
            out.push(q);
        }
    }
    out
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Geometric augmentation applied to the packed representation; channel
/// labels stay fixed (no CFA phase reshuffling).
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: Flip,
    /// Number of counter-clockwise 90-degree rotations (0..4).
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn identity() -> Self {
        Augmentation { flip: Flip::None, quarter_turns: 0 }
    }

    /// Uniform draw over {identity, hflip, vflip} x {0, 90, 180, 270}.
    /// Non-square inputs redraw the rotation from {0, 180}.
    pub fn sample(rng: &mut Rng, square: bool) -> Self {
        let flip = match rng.below(3) {
            0 => Flip::None,
            1 => Flip::Horizontal,
            _ => Flip::Vertical,
        };
        let mut quarter_turns = rng.below(4) as u8;
        if !square && quarter_turns % 2 == 1 {
            quarter_turns = rng.below(2) as u8 * 2;
        }
        Augmentation { flip, quarter_turns }
    }
}

fn flip_h(p: &PackedRaw) -> PackedRaw {
    let mut q = PackedRaw::zeros(p.width, p.height);
    for c in 0..4 {
        for y in 0..p.height {
            for x in 0..p.width {
                q.set(c, y, x, p.at(c, y, p.width - 1 - x));
            }
        }
    }
    q
}

fn flip_v(p: &PackedRaw) -> PackedRaw {
    let mut q = PackedRaw::zeros(p.width, p.height);
    for c in 0..4 {
        for y in 0..p.height {
            for x in 0..p.width {
                q.set(c, y, x, p.at(c, p.height - 1 - y, x));
            }
        }
    }
    q
}

fn rot90(p: &PackedRaw) -> PackedRaw {
    // Counter-clockwise: out(y, x) = in(x, W-1-y) with swapped dims.
    let mut q = PackedRaw::zeros(p.height, p.width);
    for c in 0..4 {
        for y in 0..q.height {
            for x in 0..q.width {
                q.set(c, y, x, p.at(c, x, p.width - 1 - y));
            }
        }
    }
    q
}

pub fn apply_augmentation(p: &PackedRaw, aug: Augmentation) -> PackedRaw {
    let mut cur = match aug.flip {
        Flip::None => p.clone(),
        Flip::Horizontal => flip_h(p),
        Flip::Vertical => flip_v(p),
    };
    for _ in 0..aug.quarter_turns % 4 {
        cur = rot90(&cur);
    }
    cur
}

/// Random flip and rotation, drawn from `rng`.
pub fn augment(p: &PackedRaw, rng: &mut Rng) -> PackedRaw {
    let aug = Augmentation::sample(rng, p.width == p.height);
    apply_augmentation(p, aug)
}

/// Returns the two green channels G1, G2 as a (1, 2, H, W) tensor.
pub fn extract_green<T: Scalar>(p: &PackedRaw) -> Tensor<T> {
    let plane = p.height * p.width;
    let mut data = Vec::with_capacity(2 * plane);
    data.extend(p.data[CH_G1 * plane..(CH_G1 + 1) * plane].iter().map(|&v| T::from_f64(v as f64)));
    data.extend(p.data[CH_G2 * plane..(CH_G2 + 1) * plane].iter().map(|&v| T::from_f64(v as f64)));
    Tensor { shape: [1, 2, p.height, p.width], data }
}

/// Shannon entropy in bits of a plane of values in [0,1], histogrammed
/// over `bins` equal-width buckets.
pub fn channel_entropy(plane: &[f32], bins: usize) -> Result<f64> {
    if plane.is_empty() {
        return Err(Error::invalid("channel_entropy", "empty plane"));
    }
    if bins == 0 {
        return Err(Error::invalid("channel_entropy", "bins must be positive"));
    }
    let mut hist = vec![0usize; bins];
    for &v in plane {
        let b = ((v as f64 * bins as f64) as usize).min(bins - 1);
        hist[b] += 1;
    }
    let n = plane.len() as f64;
    let mut h = 0.0;
    for &c in &hist {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * p.log2();
        }
    }
    Ok(h)
}

// ---------------------------------------------------------------------
// File IO: binary PGM (P5, 16-bit big-endian) + JSON sidecar, binary PPM
// (P6, 8-bit) for enhanced output.
// ---------------------------------------------------------------------

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        HeaderParser { bytes, pos: 0 }
    }

    /// Next whitespace-delimited token, skipping `#` comments.
    fn token(&mut self) -> Option<&'a [u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        if self.pos >= self.bytes.len() {
            return None;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        Some(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.token()?).ok()?.parse().ok()
    }
}

fn parse_pnm_header(
    path: &str,
    bytes: &[u8],
    magic: &[u8],
) -> Result<(usize, usize, usize, usize)> {
    let mut p = HeaderParser::new(bytes);
    match p.token() {
        Some(m) if m == magic => {}
        other => {
            return Err(Error::MalformedHeader {
                path: path.into(),
                detail: format!(
                    "expected magic {:?}, found {:?}",
                    String::from_utf8_lossy(magic),
                    other.map(|t| String::from_utf8_lossy(t).into_owned())
                ),
            })
        }
    }
    let width = p.number().ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        detail: "missing or invalid width".into(),
    })?;
    let height = p.number().ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        detail: "missing or invalid height".into(),
    })?;
    let maxval = p.number().ok_or_else(|| Error::MalformedHeader {
        path: path.into(),
        detail: "missing or invalid maxval".into(),
    })?;
    // Exactly one whitespace byte separates the header from the payload.
    Ok((width, height, maxval, p.pos + 1))
}

/// Loads a 16-bit binary PGM mosaic and its JSON sidecar.
pub fn load_mosaic(path: impl AsRef<Path>) -> Result<(RawMosaic, SidecarMeta)> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&pstr, e))?;
    let (width, height, maxval, payload) = parse_pnm_header(&pstr, &bytes, b"P5")?;
    if maxval != 65535 {
        return Err(Error::MalformedHeader {
            path: pstr,
            detail: format!("expected maxval 65535, found {}", maxval),
        });
    }
    let need = width * height * 2;
    let avail = bytes.len().saturating_sub(payload);
    if avail < need {
        return Err(Error::Truncated {
            path: pstr,
            detail: format!("need {} payload bytes, found {}", need, avail),
        });
    }
    let data: Vec<u16> = bytes[payload..payload + need]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();

    let sc_path = sidecar_path(path);
    let sc_str = sc_path.display().to_string();
    let raw = fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_str, e))?;
    let json: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| Error::Json { path: sc_str.clone(), source: e })?;
    for field in ["exposure_in", "exposure_ref", "iso"] {
        if json.get(field).is_none() {
            return Err(Error::MissingSidecarField { path: sc_str.clone(), field: field.into() });
        }
    }
    let meta: SidecarMeta =
        serde_json::from_value(json).map_err(|e| Error::Json { path: sc_str, source: e })?;
    if meta.exposure_in <= 0.0 || meta.exposure_ref <= 0.0 {
        return Err(Error::invalid("sidecar", "exposure values must be > 0"));
    }
    if let Some(r) = meta.ratio {
        if r <= 0.0 {
            return Err(Error::invalid("sidecar", "ratio override must be > 0"));
        }
    }
    let white_level = meta.white_level.unwrap_or(65535);
    let black_level = meta.black_level.unwrap_or(0);
    let mut mosaic = RawMosaic::new(width, height, data, white_level)?;
    mosaic.black_level = black_level;
    mosaic.validate()?;
    Ok((mosaic, meta))
}

/// Writes a 16-bit binary PGM (big-endian samples) plus its JSON sidecar.
pub fn save_mosaic(
    path: impl AsRef<Path>,
    mosaic: &RawMosaic,
    meta: &SidecarMeta,
) -> Result<()> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    mosaic.validate()?;
    let mut out = format!("P5\n{} {}\n65535\n", mosaic.width, mosaic.height).into_bytes();
    for &v in &mosaic.data {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(&pstr, e))?;
    let sc = sidecar_path(path);
    let sc_str = sc.display().to_string();
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| Error::Json { path: sc_str.clone(), source: e })?;
    fs::write(&sc, json).map_err(|e| Error::io(&sc_str, e))
}

/// Writes an enhanced (1,3,H,W) image as binary PPM, maxval 255,
/// quantized by round(v * 255) after clamping to [0,1].
pub fn save_image<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let [b, c, h, w] = image.shape;
    if b != 1 || c != 3 {
        return Err(Error::shape(
            "save_image",
            format!("expected (1,3,H,W), got {:?}", image.shape),
        ));
    }
    let pstr = path.as_ref().display().to_string();
    let mut out = format!("P6\n{} {}\n255\n", w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at(0, ch, y, x).to_f64().clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    fs::write(path.as_ref(), out).map_err(|e| Error::io(&pstr, e))
}

/// Loads a binary PPM (P6, maxval 255) as a (1,3,H,W) tensor in [0,1].
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let pstr = path.display().to_string();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&pstr, e))?;
    let (width, height, maxval, payload) = parse_pnm_header(&pstr, &bytes, b"P6")?;
    if maxval != 255 {
        return Err(Error::MalformedHeader {
            path: pstr,
            detail: format!("expected maxval 255, found {}", maxval),
        });
    }
    let need = width * height * 3;
    let avail = bytes.len().saturating_sub(payload);
    if avail < need {
        return Err(Error::Truncated {
            path: pstr,
            detail: format!("need {} payload bytes, found {}", need, avail),
        });
    }
    let mut t = Tensor::<T>::zeros([1, 3, height, width]);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let v = bytes[payload + (y * width + x) * 3 + c] as f64 / 255.0;
                let i = t.idx(0, c, y, x);
                t.data[i] = T::from_f64(v);
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mosaic(w: usize, h: usize, rng: &mut Rng) -> RawMosaic {
        let data = (0..w * h).map(|_| (rng.next_u64() & 0xFFFF) as u16).collect();
        RawMosaic::new(w, h, data, 65535).unwrap()
    }

    #[test]
    fn pack_basic_block() {
        let m = RawMosaic::new(2, 2, vec![100, 200, 300, 400], 1000).unwrap();
        let p = pack(&m).unwrap();
        assert!((p.at(CH_R, 0, 0) - 0.1).abs() < 1e-6);
        assert!((p.at(CH_G1, 0, 0) - 0.2).abs() < 1e-6);
        assert!((p.at(CH_G2, 0, 0) - 0.3).abs() < 1e-6);
        assert!((p.at(CH_B, 0, 0) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn pack_shape() {
        let m = random_mosaic(4, 4, &mut Rng::new(1));
        let p = pack(&m).unwrap();
        assert_eq!((p.width, p.height), (2, 2));
        assert_eq!(p.data.len(), 4 * 2 * 2);
    }

    #[test]
    fn pack_rejects_odd_dims() {
        assert!(RawMosaic::new(3, 2, vec![0; 6], 65535).is_err());
    }

    #[test]
    fn pack_unpack_roundtrip_exact() {
        let mut rng = Rng::new(7);
        for _ in 0..100 {
            let m = random_mosaic(8, 6, &mut rng);
            let p = pack(&m).unwrap();
            let back = unpack(&p, m.white_level);
            assert_eq!(back, m);
        }
    }

    #[test]
    fn amplify_scales_and_clamps() {
        let meta = SidecarMeta {
            exposure_in: 0.1,
            exposure_ref: 1.0,
            iso: 800,
            ratio: None,
            black_level: None,
            white_level: None,
        };
        assert_eq!(meta.amplification_ratio(), 10.0);
        let mut p = PackedRaw::zeros(1, 1);
        p.data = vec![0.05, 0.2, 0.01, 0.0];
        let a = amplify(&p, &meta).unwrap();
        assert!((a.data[0] - 0.5).abs() < 1e-6);
        assert_eq!(a.data[1], 1.0); // clamped
        let id = amplify_ratio(&p, 1.0).unwrap();
        assert_eq!(id.data, p.data);
        assert!(amplify_ratio(&p, 0.0).is_err());
    }

    #[test]
    fn crop_patch_counts() {
        let p = PackedRaw::zeros(512, 512);
        assert_eq!(crop_patches(&p, 256).len(), 4);
        let one = crop_patches(&p, 512);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0], p);
        // 515x260 with patch 256: 2x1 patches, borders dropped.
        let q = PackedRaw::zeros(515, 260);
        assert_eq!(crop_patches(&q, 256).len(), 2);
        // Patch larger than image: empty, not an error.
        assert!(crop_patches(&q, 600).is_empty());
    }

    #[test]
    fn augment_involutions() {
        let mut rng = Rng::new(3);
        let m = random_mosaic(8, 8, &mut rng);
        let p = pack(&m).unwrap();
        let h2 = flip_h(&flip_h(&p));
        assert_eq!(h2, p);
        let r180 = apply_augmentation(&p, Augmentation { flip: Flip::None, quarter_turns: 2 });
        let back = apply_augmentation(&r180, Augmentation { flip: Flip::None, quarter_turns: 2 });
        assert_eq!(back, p);
    }

    #[test]
    fn augment_is_isometry() {
        let mut rng = Rng::new(4);
        let m = random_mosaic(8, 8, &mut rng);
        let p = pack(&m).unwrap();
        for _ in 0..20 {
            let q = augment(&p, &mut rng);
            let mut a: Vec<u32> = p.data.iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = q.data.iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn augment_deterministic_with_seed() {
        let mut rng1 = Rng::new(5);
        let mut rng2 = Rng::new(5);
        let m = random_mosaic(8, 8, &mut Rng::new(6));
        let p = pack(&m).unwrap();
        for _ in 0..10 {
            assert_eq!(augment(&p, &mut rng1), augment(&p, &mut rng2));
        }
    }

    #[test]
    fn non_square_redraws_rotation() {
        let mut rng = Rng::new(9);
        for _ in 0..50 {
            let a = Augmentation::sample(&mut rng, false);
            assert!(a.quarter_turns % 2 == 0);
        }
    }

    #[test]
    fn extract_green_matches_mosaic() {
        let mut rng = Rng::new(10);
        let m = random_mosaic(4, 4, &mut rng);
        let p = pack(&m).unwrap();
        let g = extract_green::<f32>(&p);
        assert_eq!(g.shape, [1, 2, 2, 2]);
        for y in 0..2 {
            for x in 0..2 {
                let expect_g1 = m.at(2 * y, 2 * x + 1) as f32 / 65535.0;
                let expect_g2 = m.at(2 * y + 1, 2 * x) as f32 / 65535.0;
                assert!((g.at(0, 0, y, x) - expect_g1).abs() < 1e-6);
                assert!((g.at(0, 1, y, x) - expect_g2).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn entropy_anchors() {
        assert_eq!(channel_entropy(&vec![0.5; 64], 256).unwrap(), 0.0);
        // Half in one bin, half in another: 1 bit.
        let mut two = vec![0.1f32; 32];
        two.extend(vec![0.9f32; 32]);
        assert!((channel_entropy(&two, 256).unwrap() - 1.0).abs() < 1e-12);
        // Uniform over all 256 bins: 8 bits.
        let uni: Vec<f32> = (0..256).map(|i| (i as f32 + 0.5) / 256.0).collect();
        assert!((channel_entropy(&uni, 256).unwrap() - 8.0).abs() < 1e-12);
        assert!(channel_entropy(&[], 256).is_err());
    }

    #[test]
    fn entropy_bounded() {
        let mut rng = Rng::new(11);
        for _ in 0..20 {
            let plane: Vec<f32> = (0..100).map(|_| rng.next_f64() as f32).collect();
            let h = channel_entropy(&plane, 256).unwrap();
            assert!((0.0..=8.0).contains(&h));
        }
    }

    #[test]
    fn green_sampling_is_double() {
        // Structural 2x green property of RGGB packing: the concatenated
        // green planes hold twice as many samples as the red plane.
        let m = random_mosaic(16, 16, &mut Rng::new(12));
        let p = pack(&m).unwrap();
        let g = extract_green::<f32>(&p);
        let red_count = p.height * p.width;
        assert_eq!(g.numel(), 2 * red_count);
    }
}
