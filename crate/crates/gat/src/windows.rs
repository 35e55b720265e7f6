//! Window partitioning for shifted-window attention over a (t, h, w) token
//! grid.
//!
//! A plan precomputes everything one attention layer needs: the row gather
//! that tiles the (cyclically shifted) grid into windows, its inverse, the
//! additive mask that disables attention between tokens the shift made
//! neighbors, and the relative-position index tables for the bias lookups.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    /// Window tiling requires each grid extent to be a multiple of the
    /// (clipped) window extent on that axis.
    #[error("grid extent {extent} on axis {axis} is not a multiple of window {window}")]
    Indivisible { axis: &'static str, extent: usize, window: usize },
}

pub const AXIS_NAMES: [&str; 3] = ["t", "h", "w"];

/// Per-axis window extent after clipping to the grid.
pub fn effective_window(grid: [usize; 3], window: [usize; 3]) -> [usize; 3] {
    [grid[0].min(window[0]), grid[1].min(window[1]), grid[2].min(window[2])]
}

/// Half-window cyclic shift per axis; zero on axes the window fully covers.
pub fn shift_sizes(grid: [usize; 3], eff: [usize; 3], shifted: bool) -> [usize; 3] {
    let mut s = [0; 3];
    if shifted {
        for a in 0..3 {
            if eff[a] < grid[a] {
                s[a] = eff[a] / 2;
            }
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct WindowPlan {
    /// Number of windows.
    pub windows: usize,
    /// Tokens per window.
    pub m: usize,
    /// Grid rows → window-tiled rows (length windows·m).
    pub gather: Rc<Vec<usize>>,
    /// Window-tiled rows → grid rows (inverse of `gather`).
    pub scatter: Rc<Vec<usize>>,
    /// Additive attention mask (windows, m, m): 0 or −∞. None when no axis
    /// is shifted.
    pub mask: Option<Rc<Vec<f64>>>,
    /// Spatial bias table index per within-window pair (m·m), row-major
    /// over (query, key).
    pub sidx: Rc<Vec<usize>>,
    /// Temporal bias table index per within-window pair (m·m).
    pub tidx: Rc<Vec<usize>>,
    /// Clipped window extents.
    pub eff: [usize; 3],
    /// Applied cyclic shift per axis.
    pub shift: [usize; 3],
}

/// Spatial bias table width for a configured window: one slot per
/// (Δh, Δw) ∈ [−(w_h−1), w_h−1] × [−(w_w−1), w_w−1].
pub fn spatial_table_len(window: [usize; 3]) -> usize {
    (2 * window[1] - 1) * (2 * window[2] - 1)
}

/// Temporal bias table width: one slot per Δt ∈ [−(w_t−1), w_t−1].
pub fn temporal_table_len(window: [usize; 3]) -> usize {
    2 * window[0] - 1
}

/// Builds the plan for one attention layer. Bias index tables are sized for
/// the configured window so parameter shapes do not depend on the input;
/// clipped windows index a centered sub-range.
pub fn build_plan(
    grid: [usize; 3],
    window: [usize; 3],
    shifted: bool,
) -> Result<WindowPlan, PlanError> {
    let eff = effective_window(grid, window);
    for a in 0..3 {
        if grid[a] % eff[a] != 0 {
            return Err(PlanError::Indivisible { axis: AXIS_NAMES[a], extent: grid[a], window: eff[a] });
        }
    }
    let shift = shift_sizes(grid, eff, shifted);
    let counts = [grid[0] / eff[0], grid[1] / eff[1], grid[2] / eff[2]];
    let windows = counts[0] * counts[1] * counts[2];
    let m = eff[0] * eff[1] * eff[2];

    // Window-tiled row k covers post-shift grid position p; the token that
    // sits there after a cyclic shift by s came from original position
    // (p + s) mod n.
    let mut gather = vec![0usize; windows * m];
    let mut regions = vec![[0u8; 3]; windows * m];
    let mut k = 0;
    for wt in 0..counts[0] {
        for wh in 0..counts[1] {
            for ww in 0..counts[2] {
                for pt in 0..eff[0] {
                    for ph in 0..eff[1] {
                        for pw in 0..eff[2] {
                            let post = [wt * eff[0] + pt, wh * eff[1] + ph, ww * eff[2] + pw];
                            let mut orig = [0usize; 3];
                            for a in 0..3 {
                                orig[a] = (post[a] + shift[a]) % grid[a];
                                regions[k][a] = region_id(post[a], grid[a], eff[a], shift[a]);
                            }
                            gather[k] = (orig[0] * grid[1] + orig[1]) * grid[2] + orig[2];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    let mut scatter = vec![0usize; windows * m];
    for (tiled, &orig) in gather.iter().enumerate() {
        scatter[orig] = tiled;
    }

    let mask = if shift.iter().any(|&s| s > 0) {
        let mut mk = vec![0.0; windows * m * m];
        for w in 0..windows {
            for i in 0..m {
                for j in 0..m {
                    if regions[w * m + i] != regions[w * m + j] {
                        mk[(w * m + i) * m + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        Some(Rc::new(mk))
    } else {
        None
    };

    // Relative offsets within a window are the same for every window; the
    // tables are indexed by configured-window strides.
    let mut sidx = vec![0usize; m * m];
    let mut tidx = vec![0usize; m * m];
    let pos = |i: usize| -> [isize; 3] {
        let pt = i / (eff[1] * eff[2]);
        let ph = (i / eff[2]) % eff[1];
        let pw = i % eff[2];
        [pt as isize, ph as isize, pw as isize]
    };
    for i in 0..m {
        for j in 0..m {
            let pi = pos(i);
            let pj = pos(j);
            let dh = pi[1] - pj[1] + window[1] as isize - 1;
            let dw = pi[2] - pj[2] + window[2] as isize - 1;
            let dt = pi[0] - pj[0] + window[0] as isize - 1;
            sidx[i * m + j] = dh as usize * (2 * window[2] - 1) + dw as usize;
            tidx[i * m + j] = dt as usize;
        }
    }

    Ok(WindowPlan {
        windows,
        m,
        gather: Rc::new(gather),
        scatter: Rc::new(scatter),
        mask,
        sidx: Rc::new(sidx),
        tidx: Rc::new(tidx),
        eff,
        shift,
    })
}

/// Region label of a post-shift coordinate. The cyclic shift splits an axis
/// into three bands whose tokens were not mutual neighbors originally:
/// [0, n−w), [n−w, n−s), [n−s, n).
fn region_id(post: usize, n: usize, w: usize, s: usize) -> u8 {
    if s == 0 {
        0
    } else if post < n - w {
        0
    } else if post < n - s {
        1
    } else {
        2
    }
}

/// Per-block window configuration shorthand used by model configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl WindowSpec {
    pub fn as_array(&self) -> [usize; 3] {
        [self.t, self.h, self.w]
    }
}
