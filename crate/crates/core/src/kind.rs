use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Every model in the zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    Lr,
    Fm,
    Ffm,
    Fwfm,
    Ipnn,
    Dcn,
    DeepFmDeep,
    Cin2,
    Afm,
    AutoInt,
    Sam1,
    Sam2A,
    Sam2E,
    Sam3A,
    Sam3E,
}

impl ModelKind {
    pub const ALL: [ModelKind; 15] = [
        ModelKind::Lr,
        ModelKind::Fm,
        ModelKind::Ffm,
        ModelKind::Fwfm,
        ModelKind::Ipnn,
        ModelKind::Dcn,
        ModelKind::DeepFmDeep,
        ModelKind::Cin2,
        ModelKind::Afm,
        ModelKind::AutoInt,
        ModelKind::Sam1,
        ModelKind::Sam2A,
        ModelKind::Sam2E,
        ModelKind::Sam3A,
        ModelKind::Sam3E,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "LR",
            ModelKind::Fm => "FM",
            ModelKind::Ffm => "FFM",
            ModelKind::Fwfm => "FwFM",
            ModelKind::Ipnn => "IPNN",
            ModelKind::Dcn => "DCN",
            ModelKind::DeepFmDeep => "DeepFM-deep",
            ModelKind::Cin2 => "CIN2",
            ModelKind::Afm => "AFM",
            ModelKind::AutoInt => "AutoInt",
            ModelKind::Sam1 => "SAM1",
            ModelKind::Sam2A => "SAM2_A",
            ModelKind::Sam2E => "SAM2_E",
            ModelKind::Sam3A => "SAM3_A",
            ModelKind::Sam3E => "SAM3_E",
        }
    }

    pub fn is_sam3(self) -> bool {
        matches!(self, ModelKind::Sam3A | ModelKind::Sam3E)
    }

    pub fn is_sam2(self) -> bool {
        matches!(self, ModelKind::Sam2A | ModelKind::Sam2E)
    }

    /// Models whose head is a hidden MLP stack.
    pub fn has_mlp(self) -> bool {
        matches!(self, ModelKind::Ipnn | ModelKind::DeepFmDeep)
    }

    /// Classical FM-family and LR baselines carry a first-order term and a
    /// global bias by default.
    pub fn default_linear(self) -> bool {
        matches!(
            self,
            ModelKind::Fm | ModelKind::Ffm | ModelKind::Fwfm | ModelKind::Afm
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    /// Case-insensitive; `-` and `_` are interchangeable.
    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = |x: &str| x.to_ascii_lowercase().replace('-', "_");
        let want = norm(s.trim());
        ModelKind::ALL
            .into_iter()
            .find(|k| norm(k.name()) == want)
            .ok_or_else(|| Error::Catalog(s.to_string()))
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.name().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<ModelKind>(&json).unwrap(), k);
        }
        assert_eq!("sam2-e".parse::<ModelKind>().unwrap(), ModelKind::Sam2E);
        assert!(matches!(
            "HOFM".parse::<ModelKind>(),
            Err(Error::Catalog(_))
        ));
    }
}
