use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lip and upper-face index sets. Indices are vertex indices for vertex data
/// and control indices for rig data. The two sets may overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(rename = "lip")]
    pub lip_indices: Vec<usize>,
    #[serde(rename = "upper_face")]
    pub upper_face_indices: Vec<usize>,
}

impl RegionMask {
    pub fn new(lip: Vec<usize>, upper_face: Vec<usize>) -> Self {
        Self {
            id: None,
            lip_indices: lip,
            upper_face_indices: upper_face,
        }
    }

    /// Every index in both sets.
    pub fn full(n_groups: usize) -> Self {
        Self {
            id: Some("full".into()),
            lip_indices: (0..n_groups).collect(),
            upper_face_indices: (0..n_groups).collect(),
        }
    }

    pub fn label(&self) -> &str {
        self.id.as_deref().unwrap_or("custom")
    }

    /// Checks both sets are non-empty and in range for `n_groups` vertices or controls.
    pub fn validate(&self, n_groups: usize) -> Result<()> {
        for (name, set) in [("lip", &self.lip_indices), ("upper_face", &self.upper_face_indices)] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} mask is empty")));
            }
            if let Some(bad) = set.iter().find(|&&i| i >= n_groups) {
                return Err(Error::Config(format!(
                    "{name} mask index {bad} out of range for {n_groups} groups"
                )));
            }
        }
        Ok(())
    }

    pub fn overlap(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .lip_indices
            .iter()
            .copied()
            .filter(|i| self.upper_face_indices.contains(i))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::load(path.display().to_string(), e))?;
        let mut m: RegionMask = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if m.id.is_none() {
            m.id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lip_and_upper_face_arrays() {
        let m: RegionMask = serde_json::from_str(r#"{"lip":[1,2],"upper_face":[0,3]}"#).unwrap();
        assert_eq!(m.lip_indices, vec![1, 2]);
        assert_eq!(m.upper_face_indices, vec![0, 3]);
        m.validate(4).unwrap();
        assert!(m.validate(3).is_err());
        assert!(m.overlap().is_empty());
    }

    #[test]
    fn empty_set_rejected() {
        assert!(RegionMask::new(vec![], vec![0]).validate(4).is_err());
    }
}
