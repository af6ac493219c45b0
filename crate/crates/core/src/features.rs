//! Time-major feature matrices and their on-disk representation.
//!
//! Feature file layout (all little-endian):
//!
//! ```text
//! u32 rows      number of frames
//! u32 cols      feature dimension
//! f32 * rows * cols   row-major values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Where a feature matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    /// 40-dimensional log-mel energies, one row per 10 ms frame.
    RawMel,
    /// Frame pairs stacked to 80 dimensions and mean-variance normalized.
    StackedNormalized,
    /// Emitted directly in feature space by the corpus generator.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
    provenance: Provenance,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>, provenance: Provenance) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("feature dimension must be positive".into()));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{} values for {frames} x {dim} features",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            dim,
            data,
            provenance,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// The first `frames` frames.
    pub fn truncated(&self, frames: usize) -> Self {
        let frames = frames.min(self.frames);
        Self {
            frames,
            dim: self.dim,
            data: self.data[..frames * self.dim].to_vec(),
            provenance: self.provenance,
        }
    }

    /// `self` followed by `other` along the time axis.
    pub fn concat(&self, other: &FeatureSequence) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!(
                "cannot concatenate dim {} with dim {}",
                self.dim, other.dim
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Self {
            frames: self.frames + other.frames,
            dim: self.dim,
            data,
            provenance: self.provenance,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: Provenance) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Shape("feature file shorter than its header".into()));
        }
        let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != rows * cols * 4 {
            return Err(Error::Shape(format!(
                "feature file declares {rows} x {cols} but holds {} bytes of values",
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::new(rows, cols, data, provenance)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path, provenance: Provenance) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes, provenance)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn binary_roundtrip_is_exact_for_f32_values(
            frames in 0usize..6,
            dim in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let data: Vec<f64> = (0..frames * dim).map(|_| rng.gaussian() as f32 as f64).collect();
            let seq = FeatureSequence::new(frames, dim, data, Provenance::Synthetic).unwrap();
            let back = FeatureSequence::from_bytes(&seq.to_bytes(), Provenance::Synthetic).unwrap();
            prop_assert_eq!(back, seq);
        }
    }

    #[test]
    fn header_is_little_endian_dims() {
        let seq = FeatureSequence::new(2, 3, vec![0.0; 6], Provenance::RawMel).unwrap();
        let bytes = seq.to_bytes();
        assert_eq!(&bytes[..8], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(bytes.len(), 8 + 24);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let seq = FeatureSequence::new(2, 2, vec![1.0; 4], Provenance::RawMel).unwrap();
        let bytes = seq.to_bytes();
        assert!(FeatureSequence::from_bytes(&bytes[..bytes.len() - 1], Provenance::RawMel).is_err());
    }

    #[test]
    fn concat_appends_frames() {
        let a = FeatureSequence::new(1, 2, vec![1.0, 2.0], Provenance::Synthetic).unwrap();
        let b = FeatureSequence::new(2, 2, vec![3.0, 4.0, 5.0, 6.0], Provenance::Synthetic).unwrap();
        let c = a.concat(&b).unwrap();
        assert_eq!(c.frames(), 3);
        assert_eq!(c.frame(2), &[5.0, 6.0]);
    }
}
