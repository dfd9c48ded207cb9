use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// One input channel of a post.
///
/// The declaration order is the canonical feature order used everywhere a
/// per-modality block is concatenated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Video,
    Audio,
    User,
    Post,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Text,
        Modality::Video,
        Modality::Audio,
        Modality::User,
        Modality::Post,
    ];

    /// Modalities that receive semantic anchors.
    pub const SEMANTIC: [Modality; 3] = [Modality::Text, Modality::Video, Modality::Audio];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Video => "video",
            Modality::Audio => "audio",
            Modality::User => "user",
            Modality::Post => "post",
        }
    }

    /// `true` for the two modalities derived from structured metadata.
    pub fn is_metadata(self) -> bool {
        matches!(self, Modality::User | Modality::Post)
    }

    pub fn is_semantic(self) -> bool {
        !self.is_metadata()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown modality `{0}` (expected text, video, audio, user or post)")]
pub struct UnknownModality(pub String);

impl FromStr for Modality {
    type Err = UnknownModality;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(Modality::Text),
            "video" | "visual" => Ok(Modality::Video),
            "audio" => Ok(Modality::Audio),
            "user" => Ok(Modality::User),
            "post" => Ok(Modality::Post),
            _ => Err(UnknownModality(s.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_is_declaration_order() {
        let mut sorted = Modality::ALL;
        sorted.sort();
        assert_eq!(sorted, Modality::ALL);
    }

    #[test]
    fn parse_round_trips() {
        for m in Modality::ALL {
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), m);
        }
        assert!("smell".parse::<Modality>().is_err());
    }
}
