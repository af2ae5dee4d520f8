//! Disease class taxonomy: the global 21-class list and the per-crop subsets.
//!
//! The built-in taxonomy is compiled in. A custom taxonomy can be loaded from
//! JSON for datasets that use a different class set; it is held to the same
//! structural invariants (healthy present in every crop, ids and codes unique,
//! every crop member declared in the class list).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numeric class identifier (`0` is healthy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u8);

impl ClassId {
    pub const HEALTHY: ClassId = ClassId(0);

    pub fn is_healthy(self) -> bool {
        self == Self::HEALTHY
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLabel {
    pub id: ClassId,
    /// Row key such as `"4_CLM"`.
    pub code: String,
    pub name: String,
}

impl ClassLabel {
    /// Viral diseases occupy ids 17..=20 in the built-in list.
    pub fn is_viral(&self) -> bool {
        (17..=20).contains(&self.id.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crop {
    Strawberry,
    Eggplant,
    Tomato,
    Cucumber,
}

impl Crop {
    pub const ALL: [Crop; 4] = [Crop::Strawberry, Crop::Eggplant, Crop::Tomato, Crop::Cucumber];

    pub fn as_str(self) -> &'static str {
        match self {
            Crop::Strawberry => "strawberry",
            Crop::Eggplant => "eggplant",
            Crop::Tomato => "tomato",
            Crop::Cucumber => "cucumber",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Crop::Strawberry => "Strawberry",
            Crop::Eggplant => "Eggplant",
            Crop::Tomato => "Tomato",
            Crop::Cucumber => "Cucumber",
        }
    }
}

impl fmt::Display for Crop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Crop {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strawberry" => Ok(Crop::Strawberry),
            "eggplant" => Ok(Crop::Eggplant),
            "tomato" => Ok(Crop::Tomato),
            "cucumber" => Ok(Crop::Cucumber),
            _ => Err(TaxonomyError::UnknownCrop(s.to_string())),
        }
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("unknown crop `{0}`")]
    UnknownCrop(String),
    #[error("crop `{0}` is not defined by this taxonomy")]
    CropNotDefined(Crop),
    #[error("duplicate class id {0}")]
    DuplicateId(ClassId),
    #[error("duplicate class code `{0}`")]
    DuplicateCode(String),
    #[error("class list has no healthy class (id 0)")]
    MissingHealthy,
    #[error("crop `{0}` does not include the healthy class")]
    CropMissingHealthy(Crop),
    #[error("crop `{crop}` references class id {id} which is not in the class list")]
    UndeclaredMember { crop: Crop, id: ClassId },
    #[error("crop `{crop}` lists class id {id} more than once")]
    DuplicateMember { crop: Crop, id: ClassId },
    #[error("taxonomy defines no crops")]
    NoCrops,
    #[error("failed to read taxonomy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed taxonomy file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// The ordered class set of a single crop.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropTaxonomy {
    pub crop: Crop,
    classes: Vec<ClassLabel>,
}

impl CropTaxonomy {
    /// Member labels in id order.
    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.index_of(id).is_some()
    }

    /// Position of `id` in the id-ordered class vector (the distribution index).
    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.classes.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn label(&self, id: ClassId) -> Option<&ClassLabel> {
        self.index_of(id).map(|i| &self.classes[i])
    }

    pub fn id_at(&self, index: usize) -> Option<ClassId> {
        self.classes.get(index).map(|c| c.id)
    }
}

/// A validated class list plus per-crop subsets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    classes: Vec<ClassLabel>,
    crops: BTreeMap<Crop, CropTaxonomy>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TaxonomyFile {
    classes: Vec<ClassLabel>,
    crops: BTreeMap<Crop, Vec<ClassId>>,
}

const BUILTIN_CLASSES: [(&str, &str); 21] = [
    ("0_HE", "Healthy"),
    ("1_PM", "Powdery Mildew"),
    ("2_GM", "Gray Mold"),
    ("3_AN", "Anthracnose"),
    ("4_CLM", "Cercospora Leaf Mold"),
    ("5_LM", "Leaf Mold"),
    ("6_LB", "Late Blight"),
    ("7_DM", "Downy Mildew"),
    ("8_CLS", "Corynespora Leaf Spot"),
    ("9_CTS", "Corynespora Target Spot"),
    ("10_LS", "Leaf Spot"),
    ("11_FW", "Fusarium Wilt"),
    ("12_GSB", "Gummy Stem Blight"),
    ("13_VW", "Verticillium Wilt"),
    ("14_BW", "Bacterial Wilt"),
    ("15_BS", "Bacterial Spot"),
    ("16_BC", "Bacterial Canker"),
    ("17_CCYV", "Cucurbit Chlorotic Yellows Virus"),
    ("18_MD", "Mosaic Diseases"),
    ("19_MYSV", "Melon Yellow Spot Virus"),
    ("20_YLC", "Yellow Leaf Curl"),
];

fn builtin_crop_ids(crop: Crop) -> &'static [u8] {
    match crop {
        Crop::Strawberry => &[0, 1, 3, 11],
        Crop::Eggplant => &[0, 1, 2, 5, 10, 13, 14],
        Crop::Tomato => &[0, 1, 2, 4, 5, 6, 9, 14, 16, 20],
        Crop::Cucumber => &[0, 1, 3, 7, 8, 12, 15, 17, 18, 19],
    }
}

impl Taxonomy {
    /// The compiled-in 21-class taxonomy.
    pub fn builtin() -> &'static Taxonomy {
        static BUILTIN: OnceLock<Taxonomy> = OnceLock::new();
        BUILTIN.get_or_init(|| {
            let classes = BUILTIN_CLASSES
                .iter()
                .enumerate()
                .map(|(id, (code, name))| ClassLabel {
                    id: ClassId(id as u8),
                    code: (*code).to_string(),
                    name: (*name).to_string(),
                })
                .collect();
            let crops =
                Crop::ALL.iter().map(|&c| (c, builtin_crop_ids(c).iter().map(|&i| ClassId(i)).collect())).collect();
            Taxonomy::new(classes, crops).expect("built-in taxonomy is valid")
        })
    }

    /// Builds a taxonomy, enforcing the structural invariants.
    pub fn new(mut classes: Vec<ClassLabel>, crops: BTreeMap<Crop, Vec<ClassId>>) -> Result<Self, TaxonomyError> {
        classes.sort_by_key(|c| c.id);
        for pair in classes.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(TaxonomyError::DuplicateId(pair[0].id));
            }
        }
        let mut codes = BTreeSet::new();
        for c in &classes {
            if !codes.insert(c.code.as_str()) {
                return Err(TaxonomyError::DuplicateCode(c.code.clone()));
            }
        }
        if classes.first().map(|c| c.id) != Some(ClassId::HEALTHY) {
            return Err(TaxonomyError::MissingHealthy);
        }
        if crops.is_empty() {
            return Err(TaxonomyError::NoCrops);
        }

        let mut by_crop = BTreeMap::new();
        for (crop, mut ids) in crops {
            ids.sort();
            let mut members = Vec::with_capacity(ids.len());
            for (i, &id) in ids.iter().enumerate() {
                if i > 0 && ids[i - 1] == id {
                    return Err(TaxonomyError::DuplicateMember { crop, id });
                }
                let label = classes
                    .binary_search_by_key(&id, |c| c.id)
                    .map(|idx| classes[idx].clone())
                    .map_err(|_| TaxonomyError::UndeclaredMember { crop, id })?;
                members.push(label);
            }
            if members.first().map(|c| c.id) != Some(ClassId::HEALTHY) {
                return Err(TaxonomyError::CropMissingHealthy(crop));
            }
            by_crop.insert(crop, CropTaxonomy { crop, classes: members });
        }
        Ok(Taxonomy { classes, crops: by_crop })
    }

    pub fn from_json_str(s: &str) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = serde_json::from_str(s)?;
        Taxonomy::new(file.classes, file.crops)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let file = TaxonomyFile {
            classes: self.classes.clone(),
            crops: self.crops.iter().map(|(c, t)| (*c, t.ids())).collect(),
        };
        serde_json::to_string_pretty(&file).expect("taxonomy serializes")
    }

    pub fn classes(&self) -> &[ClassLabel] {
        &self.classes
    }

    pub fn label(&self, id: ClassId) -> Option<&ClassLabel> {
        self.classes.binary_search_by_key(&id, |c| c.id).ok().map(|i| &self.classes[i])
    }

    pub fn crop(&self, crop: Crop) -> Result<&CropTaxonomy, TaxonomyError> {
        self.crops.get(&crop).ok_or(TaxonomyError::CropNotDefined(crop))
    }

    pub fn crops(&self) -> impl Iterator<Item = &CropTaxonomy> {
        self.crops.values()
    }
}

/// The 21 built-in labels in id order.
pub fn global_classes() -> &'static [ClassLabel] {
    Taxonomy::builtin().classes()
}

/// The built-in class set for `crop`.
pub fn crop_taxonomy(crop: Crop) -> &'static CropTaxonomy {
    Taxonomy::builtin().crop(crop).expect("built-in taxonomy covers every crop")
}

pub fn validate_label(crop: Crop, id: ClassId) -> bool {
    crop_taxonomy(crop).contains(id)
}
