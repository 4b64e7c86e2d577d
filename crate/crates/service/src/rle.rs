//! Run-length encoded B-scan label masks, the wire form of label rows.

use serde::{Deserialize, Serialize};

use refnet_core::volume::codes;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    /// `[height, width]`.
    pub shape: [usize; 2],
    /// `[code, length]` pairs in row-major order.
    pub runs: Vec<[u64; 2]>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RleError {
    #[error("runs cover {covered} pixels, mask has {expected}")]
    Coverage { covered: u64, expected: u64 },
    #[error("run {0} has length zero")]
    EmptyRun(usize),
    #[error("run {index} has invalid code {code}")]
    InvalidCode { index: usize, code: u64 },
    #[error("run {0} repeats the code of the run before it")]
    RepeatedCode(usize),
    #[error("mask shape {got:?} does not match the B-scan {expected:?}")]
    Shape { got: [usize; 2], expected: [usize; 2] },
}

impl RleMask {
    pub fn encode(height: usize, width: usize, codes: &[u8]) -> Self {
        debug_assert_eq!(codes.len(), height * width);
        let mut runs: Vec<[u64; 2]> = Vec::new();
        for &c in codes {
            match runs.last_mut() {
                Some(r) if r[0] == c as u64 => r[1] += 1,
                _ => runs.push([c as u64, 1]),
            }
        }
        Self {
            shape: [height, width],
            runs,
        }
    }

    /// Checks every invariant; `allow_unresolved` admits code 255.
    pub fn validate(&self, allow_unresolved: bool) -> Result<(), RleError> {
        let mut covered = 0u64;
        for (i, &[code, len]) in self.runs.iter().enumerate() {
            let ok = code <= u8::MAX as u64
                && (codes::is_class(code as u8) || (allow_unresolved && code as u8 == codes::UNRESOLVED));
            if !ok {
                return Err(RleError::InvalidCode { index: i, code });
            }
            if len == 0 {
                return Err(RleError::EmptyRun(i));
            }
            if i > 0 && self.runs[i - 1][0] == code {
                return Err(RleError::RepeatedCode(i));
            }
            covered = covered.saturating_add(len);
        }
        let expected = (self.shape[0] * self.shape[1]) as u64;
        if covered != expected {
            return Err(RleError::Coverage { covered, expected });
        }
        Ok(())
    }

    pub fn decode(&self, allow_unresolved: bool) -> Result<Vec<u8>, RleError> {
        self.validate(allow_unresolved)?;
        let mut out = Vec::with_capacity(self.shape[0] * self.shape[1]);
        for &[code, len] in &self.runs {
            out.extend(std::iter::repeat_n(code as u8, len as usize));
        }
        Ok(out)
    }
}
