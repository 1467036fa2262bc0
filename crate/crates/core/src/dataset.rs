//! Frames ready for annotation, loaded from a KITTI-style directory tree or
//! taken straight from synthetic scenes.
//!
//! Layout under the root: `calib/`, `velodyne/`, optional `label_2/` (truth or
//! oracle 2D boxes), optional `detections/`, optional `image_size/` (`W H`).

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotator::{FrustumSample, SampleOrigin};
use crate::geometry::{frustum_filter, CameraModel, Frustum, GeometryError, PointCloud};
use crate::kitti_io::{
    frame_stem, parse_calib, parse_detections, parse_labels, read_velodyne, to_rectified, weak_labels_from_records, write_calib,
    write_labels, write_velodyne, CalibRecord, KittiError, LabelRecord, WeakLabel,
};
use crate::losses::Supervision;
use crate::synth::{sensor_origin, SynthScene, KITTI_HEIGHT, KITTI_WIDTH};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Kitti { path: PathBuf, source: KittiError },
    #[error("{path}: malformed image size")]
    ImageSize { path: PathBuf },
    #[error("frame {0}: no weak labels available for the requested source")]
    MissingLabels(u32),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Where weak 2D labels come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Ground-truth 2D boxes from `label_2/`.
    #[default]
    Oracle,
    /// Detector output from `detections/`, with confidences.
    Detector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub frame_id: u32,
    pub calib: CalibRecord,
    pub camera: CameraModel,
    /// Full LiDAR sweep in the rectified camera frame.
    pub cloud: PointCloud,
    pub sensor_origin: Vector3<f64>,
    pub weak: Vec<WeakLabel>,
    /// 3D truth when known, for evaluation only.
    pub truth: Option<Vec<LabelRecord>>,
}

impl FrameData {
    /// Frustum sample of weak label `index` supervised in 2D only.
    pub fn target_sample(&self, index: usize, weak: &WeakLabel) -> Result<FrustumSample, GeometryError> {
        let points = frustum_filter(&Frustum::new(self.camera.clone(), weak.box2d), &self.cloud)?;
        Ok(FrustumSample {
            frame_id: self.frame_id,
            object_index: index,
            points,
            weak: weak.clone(),
            camera: self.camera.clone(),
            sensor_origin: self.sensor_origin,
            supervision: Supervision::Target,
            gt3d: None,
            origin: SampleOrigin::Target,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub frames: Vec<FrameData>,
}

impl Dataset {
    pub fn num_objects(&self) -> usize {
        self.frames.iter().map(|f| f.weak.len()).sum()
    }

    pub fn from_synth(scenes: &[SynthScene], mode: LabelMode) -> Result<Self, DatasetError> {
        let mut frames = Vec::with_capacity(scenes.len());
        for s in scenes {
            let cloud =
                to_rectified(&s.cloud, &s.calib).map_err(|e| DatasetError::Kitti { path: PathBuf::from("<synthetic>"), source: e })?;
            frames.push(FrameData {
                frame_id: s.frame_id,
                calib: s.calib.clone(),
                camera: s.camera.clone(),
                cloud,
                sensor_origin: sensor_origin(&s.calib),
                weak: match mode {
                    LabelMode::Oracle => s.oracle_labels(),
                    LabelMode::Detector => s.detector_labels(),
                },
                truth: Some(s.truth_labels()),
            });
        }
        Ok(Self { frames })
    }
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| DatasetError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn kitti<T>(path: &Path, r: Result<T, KittiError>) -> Result<T, DatasetError> {
    r.map_err(|source| DatasetError::Kitti { path: path.to_path_buf(), source })
}

/// Frame ids present under `velodyne/`, ascending.
pub fn list_frames(root: &Path) -> Result<Vec<u32>, DatasetError> {
    let dir = root.join("velodyne");
    let rd = fs::read_dir(&dir).map_err(|source| DatasetError::Io { path: dir.clone(), source })?;
    let mut ids: Vec<u32> = rd
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let p = e.path();
            (p.extension()? == "bin").then(|| p.file_stem()?.to_str()?.parse().ok())?
        })
        .collect();
    ids.sort_unstable();
    Ok(ids)
}

fn image_size(root: &Path, stem: &str) -> Result<(u32, u32), DatasetError> {
    let path = root.join("image_size").join(format!("{stem}.txt"));
    if !path.exists() {
        return Ok((KITTI_WIDTH, KITTI_HEIGHT));
    }
    let text = read_text(&path)?;
    let v: Vec<u32> = text.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    match v.as_slice() {
        [w, h] if *w > 0 && *h > 0 => Ok((*w, *h)),
        _ => Err(DatasetError::ImageSize { path }),
    }
}

pub fn load_frame(root: &Path, frame_id: u32, mode: LabelMode) -> Result<FrameData, DatasetError> {
    let stem = frame_stem(frame_id);
    let calib_path = root.join("calib").join(format!("{stem}.txt"));
    let calib = kitti(&calib_path, parse_calib(&read_text(&calib_path)?))?;
    let (w, h) = image_size(root, &stem)?;
    let camera = calib.camera(w, h)?;
    let velo_path = root.join("velodyne").join(format!("{stem}.bin"));
    let bytes = fs::read(&velo_path).map_err(|source| DatasetError::Io { path: velo_path.clone(), source })?;
    let raw = kitti(&velo_path, read_velodyne(&bytes))?;
    let cloud = kitti(&velo_path, to_rectified(&raw, &calib))?;

    let label_path = root.join("label_2").join(format!("{stem}.txt"));
    let truth = if label_path.exists() { Some(kitti(&label_path, parse_labels(&read_text(&label_path)?))?) } else { None };
    let weak = match mode {
        LabelMode::Oracle => {
            let records = truth.as_ref().ok_or(DatasetError::MissingLabels(frame_id))?;
            kitti(&label_path, weak_labels_from_records(records))?
        }
        LabelMode::Detector => {
            let det_path = root.join("detections").join(format!("{stem}.txt"));
            if !det_path.exists() {
                return Err(DatasetError::MissingLabels(frame_id));
            }
            kitti(&det_path, parse_detections(&read_text(&det_path)?))?
        }
    };
    Ok(FrameData { frame_id, sensor_origin: calib.r0_rect * calib.tr_velo_to_cam.column(3), calib, camera, cloud, weak, truth })
}

pub fn load_dataset(root: &Path, mode: LabelMode) -> Result<Dataset, DatasetError> {
    let frames = list_frames(root)?.into_iter().map(|id| load_frame(root, id, mode)).collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { frames })
}

/// Writes scenes in the on-disk layout, including detector outputs.
pub fn write_synth_dataset(root: &Path, scenes: &[SynthScene]) -> Result<(), DatasetError> {
    for s in scenes {
        let stem = frame_stem(s.frame_id);
        write_file(&root.join("calib").join(format!("{stem}.txt")), write_calib(&s.calib).as_bytes())?;
        write_file(&root.join("velodyne").join(format!("{stem}.bin")), &write_velodyne(&s.cloud))?;
        write_file(&root.join("label_2").join(format!("{stem}.txt")), write_labels(&s.truth_labels()).as_bytes())?;
        let det: String = s
            .detector_labels()
            .iter()
            .map(|d| {
                format!("{} {:.2} {:.2} {:.2} {:.2} {:.4}\n", d.class_name, d.box2d.x1, d.box2d.y1, d.box2d.x2, d.box2d.y2, d.confidence)
            })
            .collect();
        write_file(&root.join("detections").join(format!("{stem}.txt")), det.as_bytes())?;
        let size = format!("{} {}\n", s.camera.image_width(), s.camera.image_height());
        write_file(&root.join("image_size").join(format!("{stem}.txt")), size.as_bytes())?;
    }
    Ok(())
}
