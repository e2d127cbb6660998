//! Label sets, descriptor vocabulary and the coarse-to-fine defect taxonomy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hardness {
    Hard,
    Soft,
}

impl Hardness {
    pub const ALL: [Hardness; 2] = [Hardness::Hard, Hardness::Soft];

    pub fn word(self) -> &'static str {
        match self {
            Hardness::Hard => "hard",
            Hardness::Soft => "soft",
        }
    }

    pub fn descriptor(self) -> &'static str {
        match self {
            Hardness::Hard => "rigid",
            Hardness::Soft => "pliable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Roughness {
    Smooth,
    Textured,
    Rough,
}

impl Roughness {
    pub const ALL: [Roughness; 3] = [Roughness::Smooth, Roughness::Textured, Roughness::Rough];

    pub fn word(self) -> &'static str {
        match self {
            Roughness::Smooth => "smooth",
            Roughness::Textured => "textured",
            Roughness::Rough => "rough",
        }
    }

    pub fn descriptor(self) -> &'static str {
        match self {
            Roughness::Smooth => "sleek",
            Roughness::Textured => "grainy",
            Roughness::Rough => "coarse",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Material {
    Metal,
    Plastic,
    Rubber,
    Wood,
    Foam,
    Glass,
    Ceramic,
    Fabric,
}

impl Material {
    pub const ALL: [Material; 8] = [
        Material::Metal,
        Material::Plastic,
        Material::Rubber,
        Material::Wood,
        Material::Foam,
        Material::Glass,
        Material::Ceramic,
        Material::Fabric,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Material::Metal => "metal",
            Material::Plastic => "plastic",
            Material::Rubber => "rubber",
            Material::Wood => "wood",
            Material::Foam => "foam",
            Material::Glass => "glass",
            Material::Ceramic => "ceramic",
            Material::Fabric => "fabric",
        }
    }

    pub fn color_word(self) -> &'static str {
        match self {
            Material::Metal => "silver",
            Material::Plastic => "blue",
            Material::Rubber => "black",
            Material::Wood => "brown",
            Material::Foam => "yellow",
            Material::Glass => "transparent",
            Material::Ceramic => "white",
            Material::Fabric => "red",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Material::Metal => [0.72, 0.72, 0.76],
            Material::Plastic => [0.20, 0.35, 0.85],
            Material::Rubber => [0.12, 0.12, 0.13],
            Material::Wood => [0.55, 0.35, 0.15],
            Material::Foam => [0.93, 0.84, 0.25],
            Material::Glass => [0.70, 0.88, 0.92],
            Material::Ceramic => [0.94, 0.94, 0.90],
            Material::Fabric => [0.80, 0.15, 0.18],
        }
    }

    /// Per-material colour offset of the tactile gel readout.
    pub fn tactile_tint(self) -> [f64; 3] {
        const T: f64 = 0.08;
        match self {
            Material::Metal => [T, 0.0, 0.0],
            Material::Plastic => [-T, 0.0, 0.0],
            Material::Rubber => [0.0, T, 0.0],
            Material::Wood => [0.0, -T, 0.0],
            Material::Foam => [0.0, 0.0, T],
            Material::Glass => [0.0, 0.0, -T],
            Material::Ceramic => [T, T, -T],
            Material::Fabric => [-T, -T, T],
        }
    }

    pub fn finish(self, roughness: Roughness) -> &'static str {
        const FINISH: [[&str; 3]; 8] = [
            ["polished", "brushed", "cast"],
            ["glossy", "satin", "ribbed"],
            ["slick", "dimpled", "knurled"],
            ["varnished", "sanded", "splintery"],
            ["skinned", "cellular", "porous"],
            ["pristine", "frosted", "etched"],
            ["glazed", "matte", "gritty"],
            ["silky", "woven", "knitted"],
        ];
        FINISH[self as usize][roughness.index()]
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.word() == word)
    }
}

/// Five descriptors in canonical order: colour, material, hardness, texture, finish.
pub fn descriptors(
    material: Material,
    hardness: Hardness,
    roughness: Roughness,
) -> [&'static str; 5] {
    [
        material.color_word(),
        material.word(),
        hardness.descriptor(),
        roughness.descriptor(),
        material.finish(roughness),
    ]
}

/// Every word that may appear in a descriptor set.
pub fn descriptor_vocabulary() -> Vec<&'static str> {
    let mut words = Vec::new();
    for m in Material::ALL {
        words.push(m.color_word());
        words.push(m.word());
    }
    for h in Hardness::ALL {
        words.push(h.descriptor());
    }
    for r in Roughness::ALL {
        words.push(r.descriptor());
    }
    for m in Material::ALL {
        for r in Roughness::ALL {
            words.push(m.finish(r));
        }
    }
    words
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
    #[serde(rename = "5")]
    Five,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Two, Granularity::Three, Granularity::Five];

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Self::Two),
            3 => Ok(Self::Three),
            5 => Ok(Self::Five),
            _ => Err(Error::config(format!(
                "granularity must be 2, 3 or 5, got {n}"
            ))),
        }
    }

    pub fn count(self) -> usize {
        match self {
            Self::Two => 2,
            Self::Three => 3,
            Self::Five => 5,
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Self::Two => &["Normal", "Defect"],
            Self::Three => &["Normal", "Scratch", "Dent"],
            Self::Five => &[
                "Normal",
                "Scratch-Surface",
                "Scratch-Edge",
                "Dent-Surface",
                "Dent-Edge",
            ],
        }
    }

    pub fn taxonomy(self) -> DefectTaxonomy {
        DefectTaxonomy {
            granularity: self,
            labels: self.labels().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectTaxonomy {
    pub granularity: Granularity,
    pub labels: Vec<&'static str>,
}

/// Level at which a label string is defined. `Normal` is reported at the finest level.
fn label_level(label: &str) -> Option<(Granularity, &'static str)> {
    Granularity::ALL
        .into_iter()
        .rev()
        .find_map(|g| g.labels().iter().find(|l| **l == label).map(|l| (g, *l)))
}

/// Projects a label to a coarser (or equal) granularity.
pub fn project_label(label: &str, target: Granularity) -> Result<&'static str> {
    let (level, canonical) =
        label_level(label).ok_or_else(|| Error::data(format!("unknown defect label `{label}`")))?;
    if canonical == "Normal" {
        return Ok("Normal");
    }
    if target > level {
        return Err(Error::contract(format!(
            "cannot refine `{label}` to {} categories",
            target.count()
        )));
    }
    let kind = canonical.split('-').next().unwrap_or(canonical);
    Ok(match target {
        Granularity::Five => canonical,
        Granularity::Three => Granularity::Three
            .labels()
            .iter()
            .find(|l| **l == kind)
            .copied()
            .unwrap_or("Defect"),
        Granularity::Two => "Defect",
    })
}

/// Answer text for a taxonomy label: lowercase words joined by spaces.
pub fn label_text(label: &str) -> String {
    label.to_lowercase().replace('-', " ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_chain() {
        assert_eq!(
            project_label("Scratch-Edge", Granularity::Three).unwrap(),
            "Scratch"
        );
        assert_eq!(
            project_label("Scratch", Granularity::Two).unwrap(),
            "Defect"
        );
        for g in Granularity::ALL {
            assert_eq!(project_label("Normal", g).unwrap(), "Normal");
        }
        assert!(project_label("Defect", Granularity::Five).is_err());
        assert!(project_label("Crack", Granularity::Two).is_err());
    }

    #[test]
    fn exhaustive_projection_table() {
        let table = [
            ("Normal", "Normal", "Normal"),
            ("Scratch-Surface", "Scratch", "Defect"),
            ("Scratch-Edge", "Scratch", "Defect"),
            ("Dent-Surface", "Dent", "Defect"),
            ("Dent-Edge", "Dent", "Defect"),
        ];
        for (fine, three, two) in table {
            assert_eq!(project_label(fine, Granularity::Five).unwrap(), fine);
            assert_eq!(project_label(fine, Granularity::Three).unwrap(), three);
            assert_eq!(project_label(fine, Granularity::Two).unwrap(), two);
            let via = project_label(
                project_label(fine, Granularity::Three).unwrap(),
                Granularity::Two,
            )
            .unwrap();
            assert_eq!(via, two);
        }
    }

    #[test]
    fn descriptor_words_are_distinct() {
        let v = descriptor_vocabulary();
        let set: std::collections::BTreeSet<_> = v.iter().collect();
        assert_eq!(set.len(), v.len());
        assert_eq!(v.len(), 16 + 2 + 3 + 24);
    }
}
