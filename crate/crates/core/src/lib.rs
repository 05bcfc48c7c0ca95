//! Data side of a small instruction-following UI agent: the textual action
//! space, the partial-match metric, episode corpora, a simulated device to
//! generate them, and the token sequences fed to the model.

pub mod action;
pub mod episode;
pub mod eval;
pub mod matcher;
pub mod raster;
pub mod sequence;
pub mod synthetic;
pub mod vocab;

pub use action::{parse_action, serialize_action, DeviceAction, NormalizedPoint};
pub use episode::{Corpus, Episode, Split, Step};
pub use matcher::{actions_match, BBox, MatchConfig};
pub use raster::Raster;
pub use vocab::Vocab;
