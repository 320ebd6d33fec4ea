use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use super::scene::{GroundTruthBox, Raster, Scene, SceneSpec};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

/// Sidecar record stored next to each scene raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image: String,
    /// Absent for unlabeled scenes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<GroundTruthBox>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub class_names: Vec<String>,
    pub spec: SceneSpec,
    /// Sidecar file names, relative to the dataset directory.
    pub scenes: Vec<String>,
}

impl Raster {
    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let img = RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::InvalidArgument("raster buffer size mismatch".into()))?;
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
        Ok(Raster::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw()))
    }
}

/// Writes `<stem>.png` and `<stem>.json` into `dir`; returns the sidecar name.
pub fn save_scene(scene: &Scene, dir: &Path, stem: &str) -> Result<String> {
    let image_name = format!("{stem}.png");
    let sidecar_name = format!("{stem}.json");
    fs::write(dir.join(&image_name), scene.image.to_png_bytes()?)?;
    let record = SceneRecord {
        image: image_name,
        boxes: Some(scene.boxes.clone()),
    };
    fs::write(dir.join(&sidecar_name), serde_json::to_vec_pretty(&record)?)?;
    Ok(sidecar_name)
}

/// Loads a scene from its sidecar; a missing box list loads as no boxes.
pub fn load_scene(sidecar: &Path) -> Result<Scene> {
    let record: SceneRecord =
        serde_json::from_slice(&fs::read(sidecar)?).map_err(|e| Error::format(sidecar, e.to_string()))?;
    let dir = sidecar.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&record.image))?;
    let image = Raster::from_png_bytes(&bytes).map_err(|e| Error::format(dir.join(&record.image), e.to_string()))?;
    let boxes = record.boxes.unwrap_or_default();
    if let Some(b) = boxes.iter().find(|b| !b.is_inside_image()) {
        return Err(Error::format(sidecar, format!("box outside the image: {b:?}")));
    }
    Ok(Scene { image, boxes })
}

pub fn save_dataset(dir: &Path, spec: &SceneSpec, scenes: &[Scene]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let names = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| save_scene(s, dir, &format!("scene_{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        class_names: spec.class_names(),
        spec: spec.clone(),
        scenes: names,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Scene>)> {
    let path = dir.join("manifest.json");
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::format(&path, e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::Version {
            expected: DATASET_VERSION,
            found: manifest.version,
        });
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|name| load_scene(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_dataset;

    #[test]
    fn dataset_round_trip_is_quantized_exact() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            image_size: 32,
            ..SceneSpec::default()
        };
        let scenes = generate_dataset(&spec, 4, 17).unwrap();
        save_dataset(dir.path(), &spec, &scenes).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.class_names.len(), 7);
        assert_eq!(loaded.len(), 4);
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.image.quantized(), b.image);
        }
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
