//! Dense displacement fields.
//!
//! Convention, fixed across the whole pipeline: `target = source + flow`.
//! Channel 0 holds the x displacement, channel 1 the y displacement, in
//! pixels at the field's own resolution.

use crate::error::{CrftError, Result};
use crate::io;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Resolution of a flow field relative to the full image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Resolution {
    #[serde(rename = "1/8")]
    Eighth,
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "full")]
    Full,
}

impl Resolution {
    /// Downscale factor from full resolution.
    pub fn factor(self) -> usize {
        match self {
            Resolution::Eighth => 8,
            Resolution::Half => 2,
            Resolution::Full => 1,
        }
    }
}

/// Per-pixel 2-vector displacement map at a stated resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    tensor: Tensor,
    pub resolution: Resolution,
}

/// Sidecar written next to every serialized flow field.
#[derive(Debug, Serialize, Deserialize)]
pub struct FlowSidecar {
    pub resolution: Resolution,
    pub full_size: (usize, usize),
    pub convention: String,
}

impl FlowField {
    /// Wrap a [1,2,H,W] tensor.
    pub fn new(tensor: Tensor, resolution: Resolution) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 2 {
            return Err(CrftError::ShapeMismatch {
                op: "FlowField::new",
                detail: format!("expected [1,2,H,W], got {:?}", s),
            });
        }
        Ok(FlowField { tensor, resolution })
    }

    pub fn zeros(h: usize, w: usize, resolution: Resolution) -> Self {
        FlowField {
            tensor: Tensor::zeros(vec![1, 2, h, w]),
            resolution,
        }
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// (dx, dy) at pixel (x, y).
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        (d[y * w + x], d[h * w + y * w + x])
    }

    pub fn set(&mut self, x: usize, y: usize, dx: f64, dy: f64) {
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data_mut();
        d[y * w + x] = dx;
        d[h * w + y * w + x] = dy;
    }

    /// Check the resolution tag against the sample's full size.
    pub fn check_full_size(&self, full_h: usize, full_w: usize) -> Result<()> {
        let f = self.resolution.factor();
        if self.height() * f != full_h || self.width() * f != full_w {
            return Err(CrftError::InvalidArgument(format!(
                "flow at {:?} with dims {}x{} does not match full size {}x{}",
                self.resolution,
                self.height(),
                self.width(),
                full_h,
                full_w
            )));
        }
        Ok(())
    }

    /// Persist as CRT1 [2,H,W] plus a JSON sidecar at `path` + ".json".
    pub fn save(&self, path: &Path, full_size: (usize, usize)) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let disk = Tensor::new(vec![2, h, w], self.tensor.data().to_vec())?;
        io::write_crt1(path, &disk)?;
        let sidecar = FlowSidecar {
            resolution: self.resolution,
            full_size,
            convention: "target=source+flow".to_string(),
        };
        io::write_json(&path.with_extension("json"), &sidecar)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let disk = io::read_crt1(path)?;
        let s = disk.shape().to_vec();
        if s.len() != 3 || s[0] != 2 {
            return Err(CrftError::format(
                path.display().to_string(),
                format!("expected [2,H,W] flow tensor, got {:?}", s),
            ));
        }
        let sidecar: FlowSidecar = io::read_json(&path.with_extension("json"))?;
        let tensor = Tensor::new(vec![1, 2, s[1], s[2]], disk.into_parts().1)?;
        FlowField::new(tensor, sidecar.resolution)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accessors_follow_channel_convention() {
        let mut f = FlowField::zeros(2, 3, Resolution::Full);
        f.set(1, 0, 3.0, -4.0);
        assert_eq!(f.at(1, 0), (3.0, -4.0));
        assert_eq!(f.at(0, 0), (0.0, 0.0));
    }

    #[test]
    fn resolution_tag_validation() {
        let f = FlowField::zeros(8, 8, Resolution::Eighth);
        assert!(f.check_full_size(64, 64).is_ok());
        assert!(f.check_full_size(32, 32).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("crft-flow-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let mut f = FlowField::zeros(4, 4, Resolution::Half);
        f.set(2, 1, 1.5, -0.25);
        let p = dir.join("flow.crt1");
        f.save(&p, (8, 8)).unwrap();
        let back = FlowField::load(&p).unwrap();
        assert_eq!(back.resolution, Resolution::Half);
        assert_eq!(back.at(2, 1), (1.5, -0.25));
    }
}
