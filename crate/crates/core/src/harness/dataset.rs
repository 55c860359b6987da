//! On-disk synthetic datasets: one directory per sequence holding numbered
//! CTFB/CTTG pairs and a ground-truth box file, plus a JSON manifest with
//! the generating spec of every sequence.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Scene, SyntheticSpec};
use crate::bundle::{read_bundle, read_token_grid, write_bundle, write_token_grid, FeatureBundle, TokenGrid};
use crate::error::{Error, Result};
use crate::metrics::{read_boxes, write_boxes, BBox};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRUTH_FILE: &str = "groundtruth.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSequence {
    pub name: String,
    pub spec: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sequences: Vec<DatasetSequence>,
}

pub fn frame_stem(i: usize) -> String {
    format!("frame_{i:04}")
}

/// Writes every sequence under `dir` and returns the manifest.
pub fn write_dataset(dir: &Path, specs: &[SyntheticSpec]) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut sequences = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let name = format!("seq_{i:04}");
        let sdir = dir.join(&name);
        fs::create_dir_all(&sdir)?;
        let scene = Scene::new(spec)?;
        let mut truth = Vec::with_capacity(spec.frames);
        for f in 0..spec.frames {
            let fr = scene.frame(f)?;
            write_bundle(&fr.bundle, &sdir.join(format!("{}.ctfb", frame_stem(f))))?;
            write_token_grid(&fr.tokens, &sdir.join(format!("{}.cttg", frame_stem(f))))?;
            truth.push((f, fr.truth));
        }
        write_boxes(&truth, &sdir.join(TRUTH_FILE))?;
        sequences.push(DatasetSequence {
            name,
            spec: spec.clone(),
        });
    }
    let manifest = Manifest { version: 1, sequences };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Input(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Input(format!("bad manifest: {e}")))?;
    for s in &m.sequences {
        s.spec.validate()?;
        if s.name.contains(['/', '\\']) || s.name.starts_with('.') {
            return Err(Error::Input(format!("bad sequence name {:?}", s.name)));
        }
    }
    Ok(m)
}

impl DatasetSequence {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.name)
    }

    pub fn truth(&self, root: &Path) -> Result<Vec<(usize, BBox)>> {
        read_boxes(&self.dir(root).join(TRUTH_FILE))
    }

    /// Reads the frames listed in the ground-truth file, in order.
    pub fn frames(&self, root: &Path) -> Result<Vec<Result<(FeatureBundle, TokenGrid, BBox)>>> {
        let dir = self.dir(root);
        Ok(self
            .truth(root)?
            .into_iter()
            .map(|(i, b)| {
                let bundle = read_bundle(&dir.join(format!("{}.ctfb", frame_stem(i))))?;
                let tokens = read_token_grid(&dir.join(format!("{}.cttg", frame_stem(i))))?;
                Ok((bundle, tokens, b))
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_sequence, suite_specs, Rect};

    #[test]
    fn round_trip_matches_generation() {
        let base = SyntheticSpec {
            scales: vec![(8, 8), (4, 4)],
            dim_g: 4,
            dim_t: 3,
            tracker_grid: (4, 4),
            n_text: 2,
            text_capacity: 3,
            target: Rect { x: 1, y: 1, w: 3, h: 2 },
            frames: 3,
            ..SyntheticSpec::default()
        };
        let specs = suite_specs(&base, 5, 2);
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(dir.path(), &specs).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), m);
        for (seq, spec) in m.sequences.iter().zip(&specs) {
            let gen = generate_sequence(spec).unwrap();
            let read = seq.frames(dir.path()).unwrap();
            assert_eq!(read.len(), gen.len());
            for (r, g) in read.into_iter().zip(gen) {
                let (b, t, truth) = r.unwrap();
                assert_eq!(b, g.bundle);
                assert_eq!(t, g.tokens);
                assert_eq!(truth, g.truth);
            }
        }
    }
}
