use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{gen_moving_shapes, CaptionLabel, SyntheticVideoSpec};
use crate::error::{Error, Result};
use crate::tensor::{nvt, Tensor};

/// `manifest.json` of one on-disk video directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub spec: Option<SyntheticVideoSpec>,
    pub label: Option<CaptionLabel>,
    pub frames: usize,
    pub frame_shape: Vec<usize>,
}

/// Writes `video: [T, ...]` as one `.nvt` per frame plus a manifest.
pub fn write_video(
    dir: &Path,
    video: &Tensor<f32>,
    spec: Option<&SyntheticVideoSpec>,
    label: Option<CaptionLabel>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let t = video.dim(0);
    let frame_shape = video.shape()[1..].to_vec();
    for i in 0..t {
        let f = video.narrow(0, i, 1)?.reshape(&frame_shape)?;
        nvt::save(dir.join(format!("frame_{i:04}.nvt")), &f)?;
    }
    let m = VideoManifest { spec: spec.cloned(), label, frames: t, frame_shape };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&m)?)?;
    Ok(())
}

pub fn read_video(dir: &Path) -> Result<(Tensor<f32>, VideoManifest)> {
    let m: VideoManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut frames = Vec::with_capacity(m.frames);
    for i in 0..m.frames {
        let f = nvt::load(dir.join(format!("frame_{i:04}.nvt")))?;
        if f.shape() != m.frame_shape {
            return Err(Error::Dataset(format!("frame {i} in {} has shape {:?}", dir.display(), f.shape())));
        }
        frames.push(f.reshape(&[1].iter().chain(&m.frame_shape).copied().collect::<Vec<_>>())?);
    }
    let refs: Vec<&Tensor<f32>> = frames.iter().collect();
    Ok((Tensor::concat(&refs, 0)?, m))
}

/// Renders and writes each spec under `root/video_NNNNN`.
pub fn write_dataset(root: &Path, specs: &[SyntheticVideoSpec]) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let (video, label) = gen_moving_shapes(spec)?;
        let dir = root.join(format!("video_{i:05}"));
        write_video(&dir, &video, Some(spec), Some(label))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let specs = vec![SyntheticVideoSpec::random(3, 16, 4)];
        let dirs = write_dataset(dir.path(), &specs).unwrap();
        let (v, m) = read_video(&dirs[0]).unwrap();
        let (orig, label) = gen_moving_shapes(&specs[0]).unwrap();
        assert_eq!(v.data(), orig.data());
        assert_eq!(m.label, Some(label));
        assert_eq!(m.spec.as_ref(), Some(&specs[0]));
    }
}
