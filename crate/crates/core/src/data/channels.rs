//! Channel naming and regional grouping of the 52 coefficients.
//!
//! Channels `0..28` drive the lip region, `28..44` the brows and eyes, and
//! `44..52` everything else. The same grouping decides which vertex region a
//! synthetic rig template deforms.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::N_BLENDSHAPES;

pub const LIP_CHANNELS: Range<usize> = 0..28;
pub const BROW_EYE_CHANNELS: Range<usize> = 28..44;
pub const OTHER_CHANNELS: Range<usize> = 44..52;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Lip,
    BrowEye,
    Other,
}

impl Region {
    pub fn of_channel(channel: usize) -> Region {
        assert!(channel < N_BLENDSHAPES, "channel {channel} out of range");
        if LIP_CHANNELS.contains(&channel) {
            Region::Lip
        } else if BROW_EYE_CHANNELS.contains(&channel) {
            Region::BrowEye
        } else {
            Region::Other
        }
    }

    pub fn channels(self) -> Range<usize> {
        match self {
            Region::Lip => LIP_CHANNELS,
            Region::BrowEye => BROW_EYE_CHANNELS,
            Region::Other => OTHER_CHANNELS,
        }
    }
}

pub const CHANNEL_NAMES: [&str; N_BLENDSHAPES] = [
    // lip region
    "jawForward",
    "jawLeft",
    "jawRight",
    "jawOpen",
    "mouthClose",
    "mouthFunnel",
    "mouthPucker",
    "mouthLeft",
    "mouthRight",
    "mouthSmileLeft",
    "mouthSmileRight",
    "mouthFrownLeft",
    "mouthFrownRight",
    "mouthDimpleLeft",
    "mouthDimpleRight",
    "mouthStretchLeft",
    "mouthStretchRight",
    "mouthRollLower",
    "mouthRollUpper",
    "mouthShrugLower",
    "mouthShrugUpper",
    "mouthPressLeft",
    "mouthPressRight",
    "mouthLowerDownLeft",
    "mouthLowerDownRight",
    "mouthUpperUpLeft",
    "mouthUpperUpRight",
    "tongueOut",
    // brow / eye region
    "browDownLeft",
    "browDownRight",
    "browInnerUp",
    "browOuterUpLeft",
    "browOuterUpRight",
    "eyeBlinkLeft",
    "eyeBlinkRight",
    "eyeSquintLeft",
    "eyeSquintRight",
    "eyeWideLeft",
    "eyeWideRight",
    "eyeLookUpLeft",
    "eyeLookUpRight",
    "eyeLookDownLeft",
    "eyeLookDownRight",
    "eyeLookInLeft",
    // other
    "eyeLookInRight",
    "eyeLookOutLeft",
    "eyeLookOutRight",
    "cheekPuff",
    "cheekSquintLeft",
    "cheekSquintRight",
    "noseSneerLeft",
    "noseSneerRight",
];
