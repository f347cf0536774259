use crate::error::{Error, Result};
use crate::net::{extract_feature, NetworkGraph};
use crate::Tensor;

/// A crop rectangle on the face canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn new(name: impl Into<String>, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self { name: name.into(), top, left, height, width }
    }

    pub fn check_fits(&self, canvas_h: usize, canvas_w: usize) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.top + self.height > canvas_h || self.left + self.width > canvas_w {
            return Err(Error::Geometry(format!(
                "region `{}` ({}x{} at {},{}) does not fit a {canvas_h}x{canvas_w} face",
                self.name, self.height, self.width, self.top, self.left
            )));
        }
        Ok(())
    }
}

/// Crops `region` from a `[C, H, W]` image and resamples it bilinearly to
/// `out_h × out_w` (pixel centres aligned, edges clamped).
pub fn crop_resize(image: &Tensor, region: &Region, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image.chw()?;
    region.check_fits(h, w)?;
    let mut out = Tensor::zeros(&[c, out_h, out_w])?;
    let src = image.data();
    let axis = |o: usize, out_len: usize, in_len: usize| {
        let pos = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let dst = out.data_mut();
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, out_h, region.height);
        for x in 0..out_w {
            let (x0, x1, fx) = axis(x, out_w, region.width);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(ch * h + region.top + yy) * w + region.left + xx];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[(ch * out_h + y) * out_w + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Horizontal flip of a `[C, H, W]` image.
pub fn mirror(image: &Tensor) -> Result<Tensor> {
    let (_, _, w) = image.chw()?;
    let mut out = image.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleEntry {
    pub region: Region,
    /// Index into [`EnsembleSpec::nets`].
    pub net: usize,
    pub flip: bool,
}

/// Ordered feature extractors whose outputs are concatenated.
#[derive(Clone, Debug)]
pub struct EnsembleSpec {
    pub entries: Vec<EnsembleEntry>,
    pub nets: Vec<NetworkGraph>,
}

impl EnsembleSpec {
    pub fn new(entries: Vec<EnsembleEntry>, nets: Vec<NetworkGraph>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Dimension("an ensemble needs at least one entry".into()));
        }
        for e in &entries {
            if e.net >= nets.len() {
                return Err(Error::Index { index: e.net, len: nets.len() });
            }
        }
        Ok(Self { entries, nets })
    }

    pub fn feature_dim(&self) -> usize {
        self.entries.iter().map(|e| self.nets[e.net].feature_dim()).sum()
    }
}

/// Concatenated features of every entry, in entry order.
pub fn ensemble_extract(spec: &EnsembleSpec, face: &Tensor) -> Result<Tensor> {
    let mut out = Vec::with_capacity(spec.feature_dim());
    for e in &spec.entries {
        let net = spec.nets.get(e.net).ok_or(Error::Index { index: e.net, len: spec.nets.len() })?;
        let cfg = &net.config;
        let mut crop = crop_resize(face, &e.region, cfg.input_h, cfg.input_w)?;
        if e.flip {
            crop = mirror(&crop)?;
        }
        out.extend_from_slice(extract_feature(net, &crop)?.data());
    }
    Ok(Tensor::vector(out))
}
