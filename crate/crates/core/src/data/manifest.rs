//! Dataset manifests and the two dataset loaders.
//!
//! A manifest is a CSV with a header row and the columns
//! `audio_path, motion_path, template_path, subject, sentence, fps` plus an
//! optional `motion_encoding` column (`displacement` or `absolute`, default
//! `displacement`). Paths are relative to the dataset root.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::container::{read_rig_csv, read_sequence, read_template, Container, ContainerKind};
use super::{AnimationSequence, AudioClip, MotionKind, TemplateMesh};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionEncoding {
    #[default]
    Displacement,
    Absolute,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ManifestEntry {
    pub audio_path: PathBuf,
    pub motion_path: PathBuf,
    #[serde(default, deserialize_with = "empty_path_as_none")]
    pub template_path: Option<PathBuf>,
    pub subject: String,
    pub sentence: String,
    pub fps: f64,
    #[serde(default)]
    pub motion_encoding: MotionEncoding,
}

impl ManifestEntry {
    pub fn label(&self) -> String {
        format!("{}/{}", self.subject, self.sentence)
    }
}

fn empty_path_as_none<'de, D>(de: D) -> std::result::Result<Option<PathBuf>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let s: Option<String> = Option::deserialize(de)?;
    Ok(s.filter(|s| !s.trim().is_empty()).map(PathBuf::from))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::load(path.display().to_string(), e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| rec.map_err(|e| Error::format(path, format!("manifest row {}: {e}", i + 1))))
        .collect()
}

#[derive(Clone, Debug)]
pub struct VertexSample {
    pub audio: AudioClip,
    pub motion: AnimationSequence,
    pub template: TemplateMesh,
}

#[derive(Clone, Debug)]
pub struct RigSample {
    pub audio: AudioClip,
    pub motion: AnimationSequence,
}

/// Motion may be at most one visual frame longer or shorter than its audio.
pub fn check_alignment(label: &str, audio: &AudioClip, motion: &AnimationSequence) -> Result<()> {
    let audio_frames = audio.duration() * motion.fps();
    if (audio_frames - motion.n_frames() as f64).abs() > 1.0 {
        return Err(Error::Alignment {
            entry: label.to_string(),
            audio_frames,
            motion_frames: motion.n_frames(),
        });
    }
    Ok(())
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn require_file(label: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::load(label, format!("missing file {}", path.display())))
    }
}

pub fn load_vertex_dataset(root: &Path, manifest: &Path) -> Result<Vec<VertexSample>> {
    let entries = read_manifest(manifest)?;
    let mut templates: HashMap<PathBuf, TemplateMesh> = HashMap::new();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let label = e.label();
        let audio_path = resolve(root, &e.audio_path);
        let motion_path = resolve(root, &e.motion_path);
        let template_path = e
            .template_path
            .as_ref()
            .map(|p| resolve(root, p))
            .ok_or_else(|| Error::load(&label, "vertex datasets need a template_path"))?;
        for p in [&audio_path, &motion_path, &template_path] {
            require_file(&label, p)?;
        }
        if !templates.contains_key(&template_path) {
            let t = read_template(&template_path).map_err(|err| Error::load(&label, err))?;
            templates.insert(template_path.clone(), t);
        }
        let template = templates[&template_path].clone();
        let raw = Container::read(&motion_path).map_err(|err| Error::load(&label, err))?;
        if raw.kind != ContainerKind::Vertex {
            return Err(Error::load(&label, format!("expected vertex motion, found {:?}", raw.kind)));
        }
        let mut frames = raw.data;
        if frames.ncols() != 3 * template.vertex_count() {
            return Err(Error::load(
                &label,
                format!(
                    "motion has {} columns but the template has {} vertices",
                    frames.ncols(),
                    template.vertex_count()
                ),
            ));
        }
        if e.motion_encoding == MotionEncoding::Absolute {
            frames -= &template.flat_row();
        }
        let motion = AnimationSequence::new(
            frames,
            MotionKind::VertexDisplacement,
            e.fps,
            &e.subject,
            &e.sentence,
        )
        .map_err(|err| Error::load(&label, err))?;
        let audio = AudioClip::load_wav(&audio_path)?;
        check_alignment(&label, &audio, &motion)?;
        out.push(VertexSample {
            audio,
            motion,
            template,
        });
    }
    Ok(out)
}

/// Loads rig/blendshape data. Motion files are either CSV (`.csv`) or rig containers.
pub fn load_rig_dataset(root: &Path, manifest: &Path) -> Result<Vec<RigSample>> {
    let entries = read_manifest(manifest)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let label = e.label();
        let audio_path = resolve(root, &e.audio_path);
        let motion_path = resolve(root, &e.motion_path);
        require_file(&label, &audio_path)?;
        require_file(&label, &motion_path)?;
        let is_csv = motion_path
            .extension()
            .is_some_and(|x| x.eq_ignore_ascii_case("csv"));
        let frames = if is_csv {
            read_rig_csv(&motion_path)?.0
        } else {
            let s = read_sequence(&motion_path)?;
            if s.kind() != MotionKind::RigControl {
                return Err(Error::load(&label, "expected rig-control motion"));
            }
            s.into_frames()
        };
        let motion =
            AnimationSequence::new(frames, MotionKind::RigControl, e.fps, &e.subject, &e.sentence)?;
        let audio = AudioClip::load_wav(&audio_path)?;
        check_alignment(&label, &audio, &motion)?;
        out.push(RigSample { audio, motion });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::container::{write_rig_csv, write_sequence, write_template};
    use ndarray::{array, Array2};
    use std::fmt::Write as _;

    fn write_audio(dir: &Path, name: &str, seconds: f64) {
        let n = (seconds * 16_000.0).round() as usize;
        AudioClip::new(vec![0.0; n], 16_000)
            .unwrap()
            .write_wav(&dir.join(name))
            .unwrap();
    }

    fn vertex_fixture(dir: &Path, encoding: &str, frames: Array2<f64>) -> PathBuf {
        let template = TemplateMesh::new(array![[1.0, 2.0, 3.0], [-4.0, 0.5, 10.0]], "toy").unwrap();
        write_template(&template, "S1", &dir.join("t.tdm")).unwrap();
        let n = frames.nrows();
        let seq =
            AnimationSequence::new(frames, MotionKind::VertexDisplacement, 25.0, "S1", "e01").unwrap();
        write_sequence(&seq, &dir.join("m.tdm")).unwrap();
        write_audio(dir, "a.wav", n as f64 / 25.0);
        let manifest = dir.join("manifest.csv");
        std::fs::write(
            &manifest,
            format!(
                "audio_path,motion_path,template_path,subject,sentence,fps,motion_encoding\n\
                 a.wav,m.tdm,t.tdm,S1,e01,25,{encoding}\n"
            ),
        )
        .unwrap();
        manifest
    }

    #[test]
    fn absolute_equal_to_template_gives_zero_displacement() {
        let dir = tempfile::tempdir().unwrap();
        let row = [1.0, 2.0, 3.0, -4.0, 0.5, 10.0];
        let frames = Array2::from_shape_fn((3, 6), |(_, c)| row[c]);
        let m = vertex_fixture(dir.path(), "absolute", frames);
        let data = load_vertex_dataset(dir.path(), &m).unwrap();
        assert_eq!(data.len(), 1);
        assert!(data[0].motion.frames().iter().all(|&v| v == 0.0));
        assert_eq!(data[0].motion.kind(), MotionKind::VertexDisplacement);
    }

    #[test]
    fn two_frame_toy_displacement() {
        let dir = tempfile::tempdir().unwrap();
        let frames = array![[1.0, 2.0, 3.0, -4.0, 0.5, 10.0], [2.0, 2.0, 3.0, -4.0, 0.5, 10.0]];
        let m = vertex_fixture(dir.path(), "absolute", frames.clone());
        let data = load_vertex_dataset(dir.path(), &m).unwrap();
        let d = data[0].motion.frames();
        assert_eq!(d.row(1).to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        // adding the template back recovers the positions
        let back = d + &data[0].template.flat_row();
        for (a, b) in back.iter().zip(frames.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn missing_file_names_the_entry() {
        let dir = tempfile::tempdir().unwrap();
        let m = vertex_fixture(dir.path(), "displacement", Array2::zeros((2, 6)));
        std::fs::remove_file(dir.path().join("m.tdm")).unwrap();
        let err = load_vertex_dataset(dir.path(), &m).unwrap_err();
        assert!(err.to_string().contains("S1/e01"), "{err}");
    }

    #[test]
    fn duration_mismatch_is_alignment_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = vertex_fixture(dir.path(), "displacement", Array2::zeros((10, 6)));
        write_audio(dir.path(), "a.wav", 0.2); // 5 frames of audio for 10 frames of motion
        let err = load_vertex_dataset(dir.path(), &m).unwrap_err();
        assert!(matches!(err, Error::Alignment { .. }), "{err}");
    }

    #[test]
    fn biwi_layout_manifest_enumerates_1120_entries() {
        let dir = tempfile::tempdir().unwrap();
        let subjects: Vec<String> = (1..=8)
            .map(|i| format!("F{i}"))
            .chain((1..=6).map(|i| format!("M{i}")))
            .collect();
        let mut csv = String::from("audio_path,motion_path,template_path,subject,sentence,fps\n");
        for s in &subjects {
            for k in 1..=40 {
                for cond in ["", "e"] {
                    let sent = format!("{cond}{k:02}");
                    writeln!(csv, "wav/{s}_{sent}.wav,vert/{s}_{sent}.tdm,tmpl/{s}.tdm,{s},{sent},25").unwrap();
                }
            }
        }
        let p = dir.path().join("biwi.csv");
        std::fs::write(&p, csv).unwrap();
        let entries = read_manifest(&p).unwrap();
        assert_eq!(entries.len(), 14 * 40 * 2);
        assert_eq!(entries.len(), 1120);
    }

    fn rig_fixture(dir: &Path, frames: Array2<f64>, fps: f64) -> PathBuf {
        let n = frames.nrows();
        let seq = AnimationSequence::new(frames, MotionKind::RigControl, fps, "U1", "s1").unwrap();
        write_rig_csv(&seq, None, &dir.join("m.csv")).unwrap();
        write_audio(dir, "a.wav", n as f64 / fps);
        let manifest = dir.join("manifest.csv");
        std::fs::write(
            &manifest,
            format!("audio_path,motion_path,template_path,subject,sentence,fps\na.wav,m.csv,,U1,s1,{fps}\n"),
        )
        .unwrap();
        manifest
    }

    #[test]
    fn arkit_rows_give_52_controls_and_600_frames() {
        let dir = tempfile::tempdir().unwrap();
        let frames = Array2::from_shape_fn((600, 52), |(r, c)| ((r * 52 + c) % 100) as f64 / 100.0);
        let m = rig_fixture(dir.path(), frames, 60.0);
        let data = load_rig_dataset(dir.path(), &m).unwrap();
        assert_eq!(data[0].motion.dim(), 52);
        assert_eq!(data[0].motion.n_frames(), 600);
        assert_eq!(data[0].motion.kind(), MotionKind::RigControl);
    }

    #[test]
    fn single_zero_frame_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let m = rig_fixture(dir.path(), Array2::zeros((1, 52)), 60.0);
        let data = load_rig_dataset(dir.path(), &m).unwrap();
        assert_eq!(data[0].motion.n_frames(), 1);
        assert!(data[0].motion.frames().iter().all(|&v| v == 0.0));
    }
}
