use crate::backbone::Command;
use crate::error::{contract_err, Result};

use super::scene::SceneSpec;

/// Every token a caption can contain. Index is the token id.
pub const VOCAB: [&str; 17] = [
    "front", "camera", ".", "day", "dusk", "night", "0", "1", "2", "3", "vehicles", "ego", "straight",
    "turns", "left", "and", "right",
];

fn maneuver(commands: &[Command]) -> &'static str {
    let left = commands.contains(&Command::Left);
    let right = commands.contains(&Command::Right);
    match (left, right) {
        (false, false) => "straight",
        (true, false) => "turns left",
        (false, true) => "turns right",
        (true, true) => "turns left and right",
    }
}

/// Templated scene description: camera prefix, time of day, vehicle count,
/// and a summary of the ego command track.
pub fn generate_caption(spec: &SceneSpec) -> String {
    format!(
        "front camera. {}. {} vehicles. ego {}.",
        spec.palette.name(),
        spec.vehicles.len(),
        maneuver(&spec.commands)
    )
}

/// Splits on whitespace with periods as their own tokens, then maps each
/// word to its vocabulary id. Unknown words are an error.
pub fn tokenize(caption: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for word in caption.split_whitespace() {
        let (stem, dot) = match word.strip_suffix('.') {
            Some(s) => (s, true),
            None => (word, false),
        };
        for piece in [stem, if dot { "." } else { "" }] {
            if piece.is_empty() {
                continue;
            }
            let id = VOCAB
                .iter()
                .position(|v| *v == piece)
                .ok_or_else(|| contract_err!("caption word {piece:?} is outside the vocabulary"))?;
            ids.push(id);
        }
    }
    Ok(ids)
}
