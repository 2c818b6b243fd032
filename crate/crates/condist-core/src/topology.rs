//! Class topology: which classes a client annotates and how the remaining
//! classes group into background organs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Global class list plus one client's view of it: foreground classes the
/// client labels, and an ordered partition of everything else into background
/// groups. Group 0 is always exactly the global background class; every later
/// group holds one unlabeled organ together with its lesion classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTopology {
    num_classes: usize,
    foreground: Vec<usize>,
    background_groups: Vec<Vec<usize>>,
}

impl ClassTopology {
    pub fn new(
        num_classes: usize,
        mut foreground: Vec<usize>,
        background_groups: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::BadTopology(format!(
                "need at least background plus one class, got {num_classes}"
            )));
        }
        foreground.sort_unstable();
        foreground.dedup();
        if foreground.is_empty() {
            return Err(Error::BadTopology("a client must label at least one class".into()));
        }
        if foreground.contains(&0) {
            return Err(Error::BadTopology("class 0 is the global background, not a foreground".into()));
        }
        if let Some(&c) = foreground.iter().find(|&&c| c >= num_classes) {
            return Err(Error::BadTopology(format!("foreground class {c} out of range")));
        }
        match background_groups.first() {
            Some(g0) if g0.as_slice() == [0] => {}
            _ => {
                return Err(Error::BadTopology(
                    "group 0 must contain exactly the global background class".into(),
                ))
            }
        }
        let mut seen = vec![false; num_classes];
        for f in &foreground {
            seen[*f] = true;
        }
        for (gi, group) in background_groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::BadTopology(format!("background group {gi} is empty")));
            }
            for &c in group {
                if c >= num_classes {
                    return Err(Error::BadTopology(format!("group class {c} out of range")));
                }
                if seen[c] {
                    return Err(Error::BadTopology(format!(
                        "class {c} appears in more than one group or in the foreground"
                    )));
                }
                seen[c] = true;
            }
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::BadTopology(format!(
                "class {c} is neither foreground nor in any background group"
            )));
        }
        let mut groups: Vec<Vec<usize>> = background_groups;
        for g in groups.iter_mut() {
            g.sort_unstable();
        }
        Ok(ClassTopology { num_classes, foreground, background_groups: groups })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Foreground classes in ascending order.
    pub fn foreground(&self) -> &[usize] {
        &self.foreground
    }

    /// Ordered background groups G_0..G_M.
    pub fn background_groups(&self) -> &[Vec<usize>] {
        &self.background_groups
    }

    /// All background classes (the complement of the foreground), ascending.
    pub fn background(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.background_groups.iter().flatten().copied().collect();
        b.sort_unstable();
        b
    }

    /// Number of unlabeled-organ groups (excludes the pure-background group 0).
    pub fn unlabeled_organs(&self) -> usize {
        self.background_groups.len() - 1
    }

    pub fn is_foreground(&self, class: usize) -> bool {
        self.foreground.binary_search(&class).is_ok()
    }

    /// Channel count of the marginal space: merged background plus each
    /// foreground class.
    pub fn merged_channels(&self) -> usize {
        1 + self.foreground.len()
    }
}

/// The fixed eight-class toy map: 0 background, then organ/tumor pairs for
/// organs A..C and a tumor-free organ D.
pub mod toy {
    use super::*;

    pub const NUM_CLASSES: usize = 8;
    pub const NUM_CLIENTS: usize = 4;
    pub const CLIENT_NAMES: [&str; NUM_CLIENTS] = ["client_a", "client_b", "client_c", "client_d"];

    /// (organ class, optional tumor class) per organ index.
    pub const ORGANS: [(usize, Option<usize>); 4] =
        [(1, Some(2)), (3, Some(4)), (5, Some(6)), (7, None)];

    /// Topology of toy client `k`: its own organ (+ tumor) as foreground, all
    /// other organs grouped with their tumors in the background.
    pub fn client_topology(client: usize) -> ClassTopology {
        assert!(client < NUM_CLIENTS, "toy map has 4 clients");
        let (organ, tumor) = ORGANS[client];
        let mut fg = vec![organ];
        if let Some(t) = tumor {
            fg.push(t);
        }
        let mut groups = vec![vec![0]];
        for (i, (o, t)) in ORGANS.iter().enumerate() {
            if i == client {
                continue;
            }
            let mut g = vec![*o];
            if let Some(t) = t {
                g.push(*t);
            }
            groups.push(g);
        }
        ClassTopology::new(NUM_CLASSES, fg, groups).expect("toy topology is valid")
    }

    /// Tumor class -> parent organ class pairs of the toy map.
    pub fn tumor_parents() -> Vec<(u8, u8)> {
        ORGANS
            .iter()
            .filter_map(|(o, t)| t.map(|t| (t as u8, *o as u8)))
            .collect()
    }
}
