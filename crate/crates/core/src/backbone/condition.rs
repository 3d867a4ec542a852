use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// Per-frame driving command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Straight,
    Left,
    Right,
}

impl Command {
    pub const ALL: [Command; 3] = [Command::Straight, Command::Left, Command::Right];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Command::Straight => "straight",
            Command::Left => "left",
            Command::Right => "right",
        }
    }
}

/// Everything the denoiser is conditioned on besides the noisy frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    pub text_tokens: Vec<usize>,
    pub commands: Vec<Command>,
    pub fps: f64,
    pub height: usize,
    pub width: usize,
    /// Replaces text and commands with the learned null token.
    pub null: bool,
}

impl ConditionSet {
    pub fn validate(&self, text_vocab: usize, frames: usize) -> Result<()> {
        if let Some(&t) = self.text_tokens.iter().find(|&&t| t >= text_vocab) {
            return Err(contract_err!("token id {t} outside vocabulary of {text_vocab}"));
        }
        if self.commands.len() != frames {
            return Err(contract_err!("{} commands for {frames} frames", self.commands.len()));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) || self.height == 0 || self.width == 0 {
            return Err(contract_err!(
                "condition scalars must be positive: fps {}, {}x{}",
                self.fps,
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    /// The same condition with the null flag set.
    pub fn dropped(&self) -> Self {
        Self {
            null: true,
            ..self.clone()
        }
    }

    /// Frames `start..start+len` of the per-frame fields.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.commands.len() {
            return Err(contract_err!(
                "window {start}..{} outside {} commands",
                start + len,
                self.commands.len()
            ));
        }
        Ok(Self {
            commands: self.commands[start..start + len].to_vec(),
            ..self.clone()
        })
    }
}
