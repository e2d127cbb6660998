//! Instruction and answer templates for the four tasks.

use serde::{Deserialize, Serialize};

use super::labels::{label_text, project_label, Granularity, Hardness, Material, Roughness};
use super::LatentObject;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hardness,
    Roughness,
    Material,
    Defect,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::Hardness,
        Task::Roughness,
        Task::Material,
        Task::Defect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Hardness => "hardness",
            Task::Roughness => "roughness",
            Task::Material => "material",
            Task::Defect => "defect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn instructions(self) -> [&'static str; 4] {
        match self {
            Task::Hardness => [
                "is this object hard or soft",
                "how hard does the object feel",
                "classify the hardness of this object",
                "what is the hardness of the object",
            ],
            Task::Roughness => [
                "is the surface smooth textured or rough",
                "how rough is the surface",
                "classify the surface roughness",
                "describe the roughness of the surface",
            ],
            Task::Material => [
                "describe the material properties",
                "list five descriptors of the material",
                "what material and surface properties does it have",
                "describe the object material and surface",
            ],
            Task::Defect => [
                "is there any defect on this part",
                "inspect the part for defects",
                "what defect does the part have",
                "report the defect type and location",
            ],
        }
    }

    pub fn answer(self, labels: &LatentObject) -> String {
        match self {
            Task::Hardness => labels.hardness.word().to_string(),
            Task::Roughness => labels.roughness.word().to_string(),
            Task::Material => labels.descriptors.join(" "),
            Task::Defect => label_text(&labels.defect),
        }
    }
}

/// Instruction used for few-shot defect adaptation at a given granularity.
pub fn defect_prompt(g: Granularity) -> &'static str {
    match g {
        Granularity::Two => "is the part normal or defective",
        Granularity::Three => "what type of defect does the part have",
        Granularity::Five => "what defect type and location does the part have",
    }
}

pub fn defect_answer(fine_label: &str, g: Granularity) -> Result<String> {
    Ok(label_text(project_label(fine_label, g)?))
}

/// Alignment caption: everything about the object except hardness.
pub fn caption(material: Material, roughness: Roughness) -> String {
    format!(
        "{} {} with {} {} surface",
        material.color_word(),
        material.word(),
        material.finish(roughness),
        roughness.descriptor()
    )
}

/// Words an ideal perception summary of the object would contain.
pub fn evidence_words(
    material: Material,
    hardness: Hardness,
    roughness: Roughness,
    defect: &str,
) -> Vec<String> {
    let mut w: Vec<String> = super::labels::descriptors(material, hardness, roughness)
        .iter()
        .map(|s| s.to_string())
        .collect();
    w.push(hardness.word().into());
    w.push(roughness.word().into());
    w.extend(label_text(defect).split(' ').map(String::from));
    w
}

/// Every word the controlled vocabulary needs, in a fixed order.
pub fn vocabulary_words() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |text: &str| {
        for w in text.split(' ').filter(|w| !w.is_empty()) {
            if !out.iter().any(|o| o == w) {
                out.push(w.to_string());
            }
        }
    };
    for t in Task::ALL {
        for i in t.instructions() {
            push(i);
        }
    }
    for g in Granularity::ALL {
        push(defect_prompt(g));
        for l in g.labels() {
            push(&label_text(l));
        }
    }
    for h in Hardness::ALL {
        push(h.word());
    }
    for r in Roughness::ALL {
        push(r.word());
    }
    for w in super::labels::descriptor_vocabulary() {
        push(w);
    }
    push("with surface");
    out
}
