//! On-disk layout: `images/NNNN.ppm`, `labels/NNNN.pgm` and `manifest.txt`.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{self, Section};
use crate::data::pnm;
use crate::data::synth::{DatasetSpec, SegSample};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub boundary_radius: usize,
    pub spec_hash: String,
    /// Labelled pixels per class over the whole dataset.
    pub class_pixels: Vec<u64>,
}

impl Manifest {
    fn render(&self) -> String {
        let pixels: Vec<String> = self.class_pixels.iter().map(u64::to_string).collect();
        format!(
            "count = {}\nheight = {}\nwidth = {}\nclasses = {}\nboundary_radius = {}\nspec_hash = \"{}\"\nclass_pixels = [{}]\n",
            self.count,
            self.height,
            self.width,
            self.classes,
            self.boundary_radius,
            self.spec_hash,
            pixels.join(", ")
        )
    }

    fn parse(text: &str) -> Result<Self> {
        let doc = config::parse(&format!("[manifest]\n{text}"))?;
        let s = Section::new(&doc, "manifest")?;
        let m = Manifest {
            count: s.usize("count", 0)?,
            height: s.usize("height", 0)?,
            width: s.usize("width", 0)?,
            classes: s.usize("classes", 0)?,
            boundary_radius: s.usize("boundary_radius", 0)?,
            spec_hash: s.string("spec_hash")?.unwrap_or_default(),
            class_pixels: s.usize_list("class_pixels", &[])?.into_iter().map(|v| v as u64).collect(),
        };
        s.finish()?;
        if m.count == 0 || m.classes == 0 || m.height == 0 || m.width == 0 || m.boundary_radius == 0 {
            return Err(Error::Dataset("manifest lacks count, extent, classes or boundary_radius".into()));
        }
        Ok(m)
    }
}

pub fn spec_hash(spec: &DatasetSpec) -> String {
    Sha256::digest(spec.canonical().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn sample_name(i: usize) -> String {
    format!("{i:04}")
}

pub fn write_dataset(dir: &Path, spec: &DatasetSpec, samples: &[SegSample]) -> Result<Manifest> {
    let mut class_pixels = vec![0u64; spec.classes];
    for s in samples {
        for &l in s.labels.data() {
            if let Some(c) = class_pixels.get_mut(l as usize) {
                *c += 1;
            }
        }
    }
    let manifest = Manifest {
        count: samples.len(),
        height: spec.height,
        width: spec.width,
        classes: spec.classes,
        boundary_radius: spec.boundary_radius,
        spec_hash: spec_hash(spec),
        class_pixels,
    };
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        pnm::write_ppm(&dir.join("images").join(format!("{}.ppm", sample_name(i))), &s.to_rgb())?;
        pnm::write_pgm(&dir.join("labels").join(format!("{}.pgm", sample_name(i))), &s.labels)?;
    }
    let p = dir.join(MANIFEST);
    fs::write(&p, manifest.render()).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a dataset directory", dir.display())));
    }
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Manifest::parse(&text).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))
}

/// Loads every sample, recomputing boundaries and edge maps.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<SegSample>)> {
    let m = read_manifest(dir)?;
    let samples = (0..m.count)
        .map(|i| load_sample(dir, &m, i))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}

pub fn load_sample(dir: &Path, m: &Manifest, i: usize) -> Result<SegSample> {
    let img = pnm::read_ppm(&dir.join("images").join(format!("{}.ppm", sample_name(i))))?;
    let labels = pnm::read_pgm(&dir.join("labels").join(format!("{}.pgm", sample_name(i))))?;
    if (img.height, img.width) != (m.height, m.width) {
        return Err(Error::Dataset(format!(
            "sample {i} is {}×{}, manifest says {}×{}",
            img.height, img.width, m.height, m.width
        )));
    }
    if let Some(&l) = labels.data().iter().find(|&&l| l as usize >= m.classes && l != crate::grid::IGNORE_LABEL) {
        return Err(Error::Dataset(format!("sample {i} has label {l} outside 0..{}", m.classes)));
    }
    SegSample::from_parts(&img, labels, m.boundary_radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::generate_dataset;

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            count: 3,
            height: 32,
            width: 48,
            ..DatasetSpec::default()
        };
        let data = generate_dataset(&spec).unwrap();
        let m = write_dataset(dir.path(), &spec, &data).unwrap();
        let (m2, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back, data);
        assert_eq!(m.class_pixels.len(), 5);
        assert_eq!(m.spec_hash.len(), 64);
        assert!(dir.path().join("images/0002.ppm").exists());
    }

    #[test]
    fn missing_directory_names_the_path() {
        let err = load_dataset(Path::new("/nonexistent/gscnn-data")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/gscnn-data"));
    }
}
