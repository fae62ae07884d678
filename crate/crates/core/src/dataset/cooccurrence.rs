use serde::{Deserialize, Serialize};

use super::annotations::AnnotationSet;
use crate::classes::{IconClass, N_CLASSES};

/// `values[x][y]` is the fraction of class-`x` images also labeled `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoOccurrenceMatrix {
    pub values: [[f64; N_CLASSES]; N_CLASSES],
    pub counts: [usize; N_CLASSES],
    /// Classes without images; their rows are all zero.
    pub empty_rows: Vec<IconClass>,
}

impl CoOccurrenceMatrix {
    pub fn get(&self, x: IconClass, y: IconClass) -> f64 {
        self.values[x.index()][y.index()]
    }
}

pub fn cooccurrence<'a>(annotations: impl IntoIterator<Item = &'a AnnotationSet>) -> CoOccurrenceMatrix {
    let mut joint = [[0usize; N_CLASSES]; N_CLASSES];
    for set in annotations {
        let mut present = [false; N_CLASSES];
        for c in set.classes() {
            present[c.index()] = true;
        }
        for x in 0..N_CLASSES {
            if present[x] {
                for y in 0..N_CLASSES {
                    if present[y] {
                        joint[x][y] += 1;
                    }
                }
            }
        }
    }
    let mut values = [[0.0; N_CLASSES]; N_CLASSES];
    let mut counts = [0usize; N_CLASSES];
    let mut empty_rows = Vec::new();
    for x in 0..N_CLASSES {
        counts[x] = joint[x][x];
        if counts[x] == 0 {
            empty_rows.push(IconClass::ALL[x]);
            continue;
        }
        for y in 0..N_CLASSES {
            values[x][y] = joint[x][y] as f64 / counts[x] as f64;
        }
    }
    CoOccurrenceMatrix {
        values,
        counts,
        empty_rows,
    }
}
